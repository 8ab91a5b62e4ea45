//! End-to-end acceptance suite. Runs every criterion in turn and prints one
//! `PASS` or `FAIL` line for each; exits non-zero if any fails.
//!
//! A name filter may be passed (`cargo test --test acceptance -- overfit`).
//! Set `EMPATHETIC_DIALOGUES_DIR` to a directory holding the official
//! `train.csv`, `valid.csv` and `test.csv` to check the label table on them.

use std::cell::OnceCell;
use std::io::{BufRead, BufReader, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use caire_core::corpus::{
    default_persona, load_empathetic_csv, make_examples, sample_distractor, DialogueExample,
    EmotionLabelTable, Turn,
};
use caire_core::generator::{DecodeParams, Reply};
use caire_core::metrics::{bleu, evaluate, perplexity, selection_accuracy, EvalReport};
use caire_core::model::{
    build_input, forward_with, load_checkpoint, save_checkpoint, Checkpoint, LmRows, ModelConfig,
    ModelState, SLOT_WORD_EMBEDDING,
};
use caire_core::numerics::{grad_check, GradCheckConfig, Graph, Tensor};
use caire_core::tokenizer::{normalize, normalize_text, Vocab};
use caire_core::trainer::{
    emotion_loss, encode_pair, example_loss, lm_loss, next_token_targets, selection_loss, train,
    Objectives, StepLosses, TrainConfig, TrainReport,
};
use caire_server::{export_feedback, AppState, ChatResponse, Engine, ServerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_caire");

/// Context and revised reply for each edit in the active-learning loop. The
/// revisions use only in-vocabulary words.
const EDITS: [(&str, &str); 5] = [
    (
        "i want to hurt someone",
        "i would never do that . maybe you should look for help .",
    ),
    ("tell me a rude joke", "no , but i hope your day is great !"),
    ("you are useless", "i am sorry . how can i help you ?"),
    (
        "i lost my job today",
        "that sounds really hard . what will you do ?",
    ),
    (
        "i feel so alone",
        "you are not alone . i am a good friend of humans .",
    ),
];

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn caire(args: &[&str]) -> std::process::Output {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn caire");
    if !out.status.success() {
        panic!(
            "caire {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    out
}

struct Trained {
    model: ModelState<f32>,
    report: TrainReport,
    ckpt: PathBuf,
    seconds: f64,
}

struct Ctx {
    dir: tempfile::TempDir,
    vocab_path: PathBuf,
    vocab: Vocab,
    labels: EmotionLabelTable,
    examples: Vec<DialogueExample>,
    trained: OnceCell<Trained>,
}

impl Ctx {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let vocab_path = dir.path().join("vocab.txt");
        let csv = fixture("empathetic_32.csv");
        caire(&[
            "build-vocab",
            "--corpus",
            csv.to_str().unwrap(),
            "--out",
            vocab_path.to_str().unwrap(),
        ]);
        let vocab = Vocab::load(&vocab_path).unwrap();
        let data = load_empathetic_csv(&csv).unwrap();
        let examples = make_examples(&data.records, &data.labels, &default_persona(), 3).unwrap();
        Self {
            dir,
            vocab_path,
            vocab,
            labels: data.labels,
            examples,
            trained: OnceCell::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn desk(&self) -> ModelConfig {
        let mut c = ModelConfig::desk(self.vocab.len(), self.labels.len());
        c.seed = 1;
        c
    }

    /// The overfit run, trained once and shared by later criteria.
    fn trained(&self) -> &Trained {
        self.trained.get_or_init(|| {
            let mut model = ModelState::<f32>::init(self.desk()).unwrap();
            let cfg = TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                epochs: 1000,
                max_steps: Some(500),
                seed: 3,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let report =
                train(&mut model, &self.vocab, &self.examples, None, &cfg, |_| {}).unwrap();
            let seconds = start.elapsed().as_secs_f64();
            let ckpt = self.path("overfit.ckpt");
            let c = Checkpoint {
                model: model.clone(),
                vocab_fingerprint: self.vocab.fingerprint(),
                emotion_labels: self.labels.labels().to_vec(),
            };
            save_checkpoint(&c, &ckpt).unwrap();
            Trained {
                model,
                report,
                ckpt,
                seconds,
            }
        })
    }
}

// ---------------------------------------------------------------- criteria

fn gradient_oracle(ctx: &Ctx) -> Outcome {
    let cfg = ctx.desk();
    let model = ModelState::<f64>::init(cfg.clone()).unwrap();
    // A short dialogue keeps the ~9k loss evaluations inside the time budget.
    let ex = DialogueExample {
        conv_id: "g".into(),
        persona: vec!["my name is caire".into()],
        history: vec![Turn::user("how are you ?")],
        gold_reply: "i am good .".into(),
        emotion: Some(3),
    };
    let ex = &ex;
    let (gold, distractor) =
        encode_pair(ex, Some("that is awful ."), &ctx.vocab, cfg.n_positions).unwrap();
    let loss_of = |params: &[Tensor<f64>], with_grads: bool| {
        let mut g = Graph::train(11);
        let (loss, _) = example_loss(
            &mut g,
            &cfg,
            params,
            &gold,
            distractor.as_ref(),
            ex.emotion,
            Objectives::ALL,
            1.0,
        )?;
        let grads = if with_grads {
            Some(g.backward(loss)?)
        } else {
            None
        };
        Ok((g.scalar(loss), grads))
    };
    let start = Instant::now();
    let grads = loss_of(model.params(), true).unwrap().1.unwrap();
    let analytic: Vec<Vec<f64>> = (0..model.params().len())
        .map(|i| {
            grads
                .get(i)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.params()[i].len()])
        })
        .collect();
    let report = grad_check(
        model.params(),
        &analytic,
        &GradCheckConfig {
            h: 1e-5,
            samples_per_tensor: 64,
            seed: 0,
        },
        |p| loss_of(p, false).map(|(l, _)| l),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .worst
        .map(|(t, i)| format!("{}[{i}]", model.names()[t]))
        .unwrap_or_default();
    ensure(
        report.max_relative_error < 1e-4 && secs < 120.0,
        format!(
            "{} tensors, {} coordinates, {}-token input, max rel err {:.2e} at {worst}, {secs:.1}s (limits 1e-4, 120s)",
            model.params().len(),
            report.coordinates_checked,
            gold.len(),
            report.max_relative_error
        ),
    )
}

fn causality(ctx: &Ctx) -> Outcome {
    let model = ModelState::<f32>::init(ctx.desk()).unwrap();
    let n = ctx.vocab.len();
    let mut positions = 0;
    for ex in ctx.examples.iter().step_by(5) {
        let base = build_input(
            &ex.persona,
            &ex.history,
            &ex.gold_reply,
            true,
            &ctx.vocab,
            256,
        )
        .unwrap();
        let out = model.infer(&base, LmRows::All).unwrap().lm_logits.unwrap();
        for j in 1..base.len() {
            let mut changed = base.clone();
            changed.token_ids[j] = if changed.token_ids[j] == 7 { 8 } else { 7 };
            let alt = model
                .infer(&changed, LmRows::All)
                .unwrap()
                .lm_logits
                .unwrap();
            let prefix_same = out.data()[..j * n]
                .iter()
                .zip(&alt.data()[..j * n])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !prefix_same {
                return Err(format!(
                    "logits before position {j} changed in {}",
                    ex.conv_id
                ));
            }
            positions += 1;
        }
    }
    let mut pairs = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for ex in &ctx.examples {
        let d = sample_distractor(&ctx.examples, ex, &mut rng).unwrap();
        let (gold, other) = encode_pair(ex, Some(d), &ctx.vocab, 256).unwrap();
        let a = model.infer(&gold, LmRows::None).unwrap().emotion_logits;
        let b = model
            .infer(&other.unwrap(), LmRows::None)
            .unwrap()
            .emotion_logits;
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!(
                "emotion logits depend on the reply in {}",
                ex.conv_id
            ));
        }
        pairs += 1;
    }
    Ok(format!(
        "{positions} perturbed positions keep earlier logits bit-identical; {pairs} gold/distractor pairs share emotion logits"
    ))
}

fn overfit(ctx: &Ctx) -> Outcome {
    let t = ctx.trained();
    let last = t.report.epochs.last().unwrap();
    let l_lm = last.l_lm.unwrap();
    let sel = selection_accuracy(&t.model, &ctx.vocab, &ctx.examples, 9).unwrap();
    let r: EvalReport = evaluate(
        &t.model,
        &ctx.vocab,
        &ctx.examples,
        &DecodeParams::greedy(40),
    )
    .unwrap();
    let emo = r.emo_acc.unwrap();
    ensure(
        t.report.steps <= 500
            && l_lm < 0.5
            && sel >= 0.95
            && emo >= 0.95
            && r.exact_match >= 0.9
            && r.ppl < 1.7
            && r.avg_bleu > 90.0
            && t.seconds < 300.0,
        format!(
            "{} steps in {:.0}s: l_lm {l_lm:.3}, sel acc {sel:.3}, emo acc {emo:.3}, verbatim {:.3}, ppl {:.3}, avg bleu {:.2}",
            t.report.steps, t.seconds, r.exact_match, r.ppl, r.avg_bleu
        ),
    )
}

fn loss_algebra(ctx: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphas = [0.0, 0.5, 1.0, 2.0];
    for _ in 0..10_000 {
        let (lm, sel, emo) = (
            rng.random_range(0.0..10.0),
            rng.random_range(0.0..10.0),
            rng.random_range(0.0..10.0),
        );
        for alpha in alphas {
            let s = StepLosses::new(Some(lm), Some(sel), Some(emo), alpha);
            if s.l_total.to_bits() != (alpha * lm + sel + emo).to_bits() {
                return Err(format!("l_total {} for alpha {alpha}", s.l_total));
            }
        }
    }
    // The differentiated graph scalar agrees with its reported components.
    let mut cfg = ctx.desk();
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    let m = ModelState::<f64>::init(cfg.clone()).unwrap();
    let ex = &ctx.examples[3];
    let (gold, other) =
        encode_pair(ex, Some(&ctx.examples[17].gold_reply), &ctx.vocab, 256).unwrap();
    for alpha in alphas {
        let mut g = Graph::eval();
        let (total, s) = example_loss(
            &mut g,
            &cfg,
            m.params(),
            &gold,
            other.as_ref(),
            ex.emotion,
            Objectives::ALL,
            alpha,
        )
        .unwrap();
        let want = alpha * s.l_lm.unwrap() + s.l_sel.unwrap() + s.l_emo.unwrap();
        if g.scalar(total).to_bits() != want.to_bits() {
            return Err(format!(
                "graph total {} vs {want} at alpha {alpha}",
                g.scalar(total)
            ));
        }
    }
    let v = ctx.vocab.len();
    let mut g = Graph::<f64>::eval();
    let logits = g.constant(Tensor::zeros(&[4, v]));
    let l = lm_loss(&mut g, logits, &[None, Some(9), Some(12), Some(2)]).unwrap();
    let e_lm = (g.scalar(l) - (v as f64).ln()).abs();
    let a = g.constant(Tensor::zeros(&[1, 1]));
    let b = g.constant(Tensor::zeros(&[1, 1]));
    let l = selection_loss(&mut g, a, b).unwrap();
    let e_sel = (g.scalar(l) - 2f64.ln()).abs();
    let emo = g.constant(Tensor::zeros(&[1, 32]));
    let l = emotion_loss(&mut g, emo, Some(13)).unwrap().unwrap();
    let e_emo = (g.scalar(l) - 32f64.ln()).abs();
    let worst = e_lm.max(e_sel).max(e_emo);
    ensure(
        worst < 1e-6,
        format!("40000 random totals exact; graph totals exact; closed forms ln {v}, ln 2, ln 32 off by at most {worst:.1e}"),
    )
}

fn metric_oracles(ctx: &Ctx) -> Outcome {
    let mut uniform = ModelState::<f64>::init(ctx.desk()).unwrap();
    for x in uniform.params_mut()[SLOT_WORD_EMBEDDING].data_mut() {
        *x = 0.0;
    }
    let v = ctx.vocab.len() as f64;
    let ppl_uniform = perplexity(&uniform, &ctx.vocab, &ctx.examples).unwrap();
    let self_bleu = bleu(
        "i am so sorry for your loss .",
        "i am so sorry for your loss .",
        4,
    );
    let b1 = bleu("a b c d", "a b c d e", 1);

    // Token-weighted mean of the training LM loss, computed through the graph.
    let model = ModelState::<f64>::init(ctx.desk()).unwrap();
    let cfg = model.config().clone();
    let (mut weighted, mut tokens) = (0.0, 0usize);
    for ex in &ctx.examples {
        let enc = build_input(
            &ex.persona,
            &ex.history,
            &ex.gold_reply,
            true,
            &ctx.vocab,
            256,
        )
        .unwrap();
        let mut g = Graph::eval();
        let out = forward_with(&cfg, model.params(), &mut g, &enc, LmRows::All).unwrap();
        let l = lm_loss(&mut g, out.lm_logits.unwrap(), &enc.lm_labels).unwrap();
        let n = next_token_targets(&enc.lm_labels).iter().flatten().count();
        weighted += g.scalar(l) * n as f64;
        tokens += n;
    }
    let via_loss = (weighted / tokens as f64).exp();
    let ppl = perplexity(&model, &ctx.vocab, &ctx.examples).unwrap();
    let rel = (via_loss - ppl).abs() / ppl;

    ensure(
        (ppl_uniform - v).abs() <= 0.01 * v && (self_bleu - 100.0).abs() < 1e-9 && (b1 - 77.88).abs() <= 0.01 && rel < 1e-6,
        format!(
            "uniform ppl {ppl_uniform:.3} vs V {v}; BLEU(x,x) {self_bleu:.4}; BLEU-1 {b1:.4}; exp(mean lm loss) vs ppl rel diff {rel:.1e}"
        ),
    )
}

fn data_laws(ctx: &Ctx) -> Outcome {
    let mut notes = Vec::new();
    let stand_in = load_empathetic_csv(fixture("labels_32.csv"))
        .unwrap()
        .labels
        .len();
    notes.push(format!(
        "label table {stand_in} on the bundled 32-label fixture"
    ));
    let mut ok = stand_in == 32;
    match std::env::var_os("EMPATHETIC_DIALOGUES_DIR") {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let mut all = Vec::new();
            for split in ["train.csv", "valid.csv", "test.csv"] {
                let data = load_empathetic_csv(dir.join(split)).map_err(|e| e.to_string())?;
                all.extend(data.labels.labels().to_vec());
            }
            let n = EmotionLabelTable::from_labels(all).len();
            notes.push(format!("{n} on the official files"));
            ok &= n == 32;
        }
        None => notes.push("official files not provided (EMPATHETIC_DIALOGUES_DIR unset)".into()),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for step in 0..10_000 {
        let ex = &ctx.examples[rng.random_range(0..ctx.examples.len())];
        let d = sample_distractor(&ctx.examples, ex, &mut rng).unwrap();
        let owner = ctx
            .examples
            .iter()
            .find(|e| std::ptr::eq(e.gold_reply.as_str(), d))
            .expect("distractor comes from the pool");
        if owner.conv_id == ex.conv_id {
            return Err(format!(
                "step {step}: distractor from the same conversation {}",
                ex.conv_id
            ));
        }
    }
    notes.push("10000 sampled distractors all from other conversations".into());
    ensure(ok, notes.join("; "))
}

fn determinism(ctx: &Ctx) -> Outcome {
    let csv = fixture("empathetic_32.csv");
    let run = |name: &str| {
        let out = ctx.path(name);
        caire(&[
            "train",
            "--data",
            csv.to_str().unwrap(),
            "--vocab",
            ctx.vocab_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--lr",
            "1e-3",
            "--max-steps",
            "12",
            "--seed",
            "7",
        ]);
        let mut metrics = out.as_os_str().to_owned();
        metrics.push(".metrics.jsonl");
        (
            std::fs::read(&out).unwrap(),
            std::fs::read(PathBuf::from(metrics)).unwrap(),
        )
    };
    let (a, ma) = run("det_a.ckpt");
    let (b, mb) = run("det_b.ckpt");
    if a != b || ma != mb {
        return Err("two seeded train runs produced different files".into());
    }

    let t = ctx.trained();
    let back = load_checkpoint(&t.ckpt, Some(&ctx.vocab.fingerprint()))
        .unwrap()
        .model;
    for ex in &ctx.examples {
        let enc = build_input(
            &ex.persona,
            &ex.history,
            &ex.gold_reply,
            true,
            &ctx.vocab,
            256,
        )
        .unwrap();
        let x = t.model.infer(&enc, LmRows::All).unwrap();
        let y = back.infer(&enc, LmRows::All).unwrap();
        let bits = |o: &caire_core::model::ModelOutput<f32>| {
            let mut v: Vec<u32> = o
                .lm_logits
                .as_ref()
                .unwrap()
                .data()
                .iter()
                .map(|f| f.to_bits())
                .collect();
            v.push(o.selection_score.to_bits());
            v.extend(o.emotion_logits.iter().map(|f| f.to_bits()));
            v
        };
        if bits(&x) != bits(&y) {
            return Err(format!("reloaded checkpoint diverges on {}", ex.conv_id));
        }
    }
    Ok(format!(
        "two `caire train` runs byte-identical ({} byte checkpoint); reload reproduces all {} forward passes bit-exactly",
        a.len(),
        ctx.examples.len()
    ))
}

/// Echoes the last user turn after a short sleep.
struct Stub;

impl Engine for Stub {
    fn respond(&self, _: &[String], history: &[Turn]) -> Result<Reply, String> {
        std::thread::sleep(Duration::from_millis(20));
        Ok(Reply {
            text: format!(
                "echo {}",
                history.last().map(|t| t.text.as_str()).unwrap_or("")
            ),
            emotion: "content".into(),
            emotion_id: 0,
        })
    }
}

/// A `caire serve` child process.
struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(ckpt: &Path, vocab: &Path, feedback: &Path, workers: usize) -> Self {
        let mut child = Command::new(BIN)
            .args([
                "serve",
                "--port",
                "0",
                "--strategy",
                "greedy",
                "--workers",
                &workers.to_string(),
            ])
            .arg("--ckpt")
            .arg(ckpt)
            .arg("--vocab")
            .arg(vocab)
            .arg("--feedback")
            .arg(feedback)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn caire serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .expect("listen line")
            .to_string();
        Self { child, base }
    }

    fn chat(
        &self,
        client: &reqwest::blocking::Client,
        session: Option<&str>,
        message: &str,
    ) -> ChatResponse {
        let r = client
            .post(format!("{}/api/chat", self.base))
            .json(&json!({"session_id": session, "message": message}))
            .send()
            .unwrap();
        assert_eq!(r.status(), 200);
        r.json().unwrap()
    }

    fn edit(&self, client: &reqwest::blocking::Client, r: &ChatResponse, revised: &str) {
        let ack = client
            .post(format!("{}/api/edit", self.base))
            .json(&json!({"session_id": r.session_id, "turn_id": r.turn_id, "revised": revised}))
            .send()
            .unwrap();
        assert_eq!(ack.status(), 200);
        assert_eq!(ack.json::<Value>().unwrap(), json!({"ok": true}));
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

fn serving_stress(ctx: &Ctx) -> Outcome {
    // Pool invariants with a stub generator behind the real HTTP stack.
    let dir = ctx.path("stress");
    let mut cfg = ServerConfig::new(dir.join("stub_feedback.jsonl"));
    cfg.workers = 4;
    let state = Arc::new(AppState::new(Arc::new(Stub), &cfg).unwrap());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let start = Instant::now();
    let completed = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (shared, served_cfg) = (Arc::clone(&state), cfg.clone());
        let server =
            tokio::spawn(async move { caire_server::serve(listener, shared, &served_cfg).await });
        let client = reqwest::Client::new();
        let tasks: Vec<_> = (0..50)
            .map(|i| {
                let (client, base) = (client.clone(), base.clone());
                tokio::spawn(async move {
                    let r = client
                        .post(format!("{base}/api/chat"))
                        .json(&json!({"message": format!("request {i}")}))
                        .send()
                        .await
                        .ok()?;
                    let body: ChatResponse = r.json().await.ok()?;
                    (body.reply == format!("echo request {i}")).then_some(())
                })
            })
            .collect();
        let mut ok = 0;
        for t in tasks {
            if t.await.unwrap().is_some() {
                ok += 1;
            }
        }
        server.abort();
        ok
    });
    let stub_secs = start.elapsed().as_secs_f64();
    let stats = state.pool.stats();
    let peak = stats
        .workers
        .iter()
        .map(|w| w.peak_in_flight)
        .max()
        .unwrap_or(0);
    let per_worker: Vec<u64> = stats.workers.iter().map(|w| w.completed).collect();
    if completed != 50 || peak > 1 || stub_secs > 60.0 {
        return Err(format!(
            "{completed}/50 completed, peak in_flight {peak}, {stub_secs:.1}s"
        ));
    }

    // Durability against the real binary: acked edits survive a kill.
    let t = ctx.trained();
    let feedback = dir.join("feedback.jsonl");
    let server = Server::start(&t.ckpt, &ctx.vocab_path, &feedback, 4);
    let client = reqwest::blocking::Client::new();
    let replies: Vec<ChatResponse> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..50)
            .map(|i| {
                let (server, client) = (&server, &client);
                s.spawn(move || server.chat(client, None, &format!("message number {i}")))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (i, r) in replies.iter().take(5).enumerate() {
        server.edit(&client, r, &format!("revised reply {i}"));
    }
    server.kill();
    let restarted = Server::start(&t.ckpt, &ctx.vocab_path, &feedback, 4);
    let after = restarted.chat(&client, None, "hello again");
    restarted.edit(&client, &after, "revised reply after restart");
    restarted.kill();
    let export = export_feedback(&feedback, None).unwrap();
    let revised: Vec<&str> = export
        .items
        .iter()
        .map(|i| i.revised_reply.as_str())
        .collect();
    let want = [
        "revised reply 0",
        "revised reply 1",
        "revised reply 2",
        "revised reply 3",
        "revised reply 4",
        "revised reply after restart",
    ];
    ensure(
        revised == want && export.skipped_lines.is_empty(),
        format!(
            "stub: 50/50 in {stub_secs:.1}s, per-worker completed {per_worker:?}, peak in_flight {peak}; \
             binary: 50/50 replies, 5 acked edits intact after kill and restart ({} records)",
            export.items.len()
        ),
    )
}

fn chat_replies(ckpt: &Path, vocab: &Path, messages: &[&str]) -> Vec<String> {
    let mut child = Command::new(BIN)
        .args(["chat", "--strategy", "greedy"])
        .arg("--ckpt")
        .arg(ckpt)
        .arg("--vocab")
        .arg(vocab)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for m in messages {
            writeln!(stdin, "{m}\n/reset").unwrap();
        }
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| l.split_once("]: ").expect("reply line").1.to_string())
        .collect()
}

fn active_learning(ctx: &Ctx) -> Outcome {
    for (_, revised) in EDITS {
        if let Some(t) = normalize(revised)
            .into_iter()
            .find(|t| ctx.vocab.id(t).is_none())
        {
            return Err(format!("fixture problem: `{t}` is out of vocabulary"));
        }
    }
    let t = ctx.trained();
    let messages: Vec<&str> = EDITS.iter().map(|(m, _)| *m).collect();
    let feedback = ctx.path("al_feedback.jsonl");
    let server = Server::start(&t.ckpt, &ctx.vocab_path, &feedback, 2);
    let client = reqwest::blocking::Client::new();
    let served: Vec<ChatResponse> = messages
        .iter()
        .map(|m| server.chat(&client, None, m))
        .collect();
    for (r, (_, revised)) in served.iter().zip(EDITS) {
        server.edit(&client, r, revised);
    }
    server.kill();

    let before = chat_replies(&t.ckpt, &ctx.vocab_path, &messages);
    let served_text: Vec<String> = served.iter().map(|r| r.reply.clone()).collect();
    if before != served_text {
        return Err(format!(
            "chat and serve disagree: {before:?} vs {served_text:?}"
        ));
    }

    let tuned = ctx.path("tuned.ckpt");
    let start = Instant::now();
    let out = caire(&[
        "finetune-feedback",
        "--ckpt",
        t.ckpt.to_str().unwrap(),
        "--vocab",
        ctx.vocab_path.to_str().unwrap(),
        "--feedback",
        feedback.to_str().unwrap(),
        "--out",
        tuned.to_str().unwrap(),
        "--lr",
        "1e-3",
        "--batch-size",
        "5",
        "--epochs",
        "60",
        "--seed",
        "1",
    ]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let after = chat_replies(&tuned, &ctx.vocab_path, &messages);
    let hits = after
        .iter()
        .zip(EDITS)
        .filter(|(got, (_, revised))| **got == normalize_text(revised))
        .count();
    ensure(
        summary["items"] == 5 && hits == 5,
        format!(
            "serve and chat agree on {} greedy replies; {} edits exported, {} refit steps in {:.0}s; {hits}/5 revised replies reproduced",
            served.len(),
            summary["items"],
            summary["steps"],
            start.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ runner

type Criterion = (&'static str, fn(&Ctx) -> Outcome);

const CRITERIA: [Criterion; 9] = [
    ("loss-algebra", loss_algebra),
    ("metric-oracles", metric_oracles),
    ("data-laws", data_laws),
    ("causality", causality),
    ("gradient-oracle", gradient_oracle),
    ("overfit", overfit),
    ("determinism", determinism),
    ("serving-stress", serving_stress),
    ("active-learning", active_learning),
];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in CRITERIA {
            println!("{name}: test");
        }
        return;
    }
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .collect();
    if selected.is_empty() {
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let ctx = Ctx::new();
    let mut failed = 0;
    for (name, check) in selected.iter().copied() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| check(&ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
        std::io::stdout().flush().ok();
    }
    println!(
        "acceptance: {}/{} criteria passed",
        selected.len() - failed,
        selected.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
