use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use caire_core::corpus::{
    default_persona, load_empathetic_csv, load_persona_pretraining, make_examples,
    split_by_conversation, DialogueExample, EmotionLabelTable,
};
use caire_core::generator::{dialogue_history, DecodeParams, Responder, Strategy};
use caire_core::metrics::evaluate;
use caire_core::model::{
    load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelState, N_DIALOGUE_STATES,
};
use caire_core::numerics::AdamConfig;
use caire_core::tokenizer::{normalize, Vocab};
use caire_core::trainer::{
    finetune_on_feedback, train, EpochLog, Objectives, TrainConfig, TrainReport,
};
use caire_core::Error;
use caire_server::{export_feedback, AppState, ServerConfig};
use serde_json::json;

use crate::args::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::PretrainPersona(a) => pretrain_persona(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Chat(a) => chat(a),
        Command::Serve(a) => serve(a),
        Command::FinetuneFeedback(a) => finetune(a),
    }
}

fn train_config(o: &OptimArgs, objectives: Objectives) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        alpha: o.alpha,
        lr: o.lr,
        batch_size: o.batch_size,
        epochs: o.epochs,
        max_steps: o.max_steps,
        grad_clip_norm: o.grad_clip,
        seed: o.seed,
        objectives,
        adam: AdamConfig {
            beta1: o.adam_beta1,
            beta2: o.adam_beta2,
            eps: o.adam_eps,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(
    m: &ModelArgs,
    vocab_size: usize,
    n_emotions: usize,
    seed: u64,
) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        d_model: m.d_model,
        d_ff: m.d_ff,
        vocab_size,
        n_positions: m.n_positions,
        n_dialogue_states: N_DIALOGUE_STATES,
        n_emotions,
        dropout: m.dropout,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn decode_params(d: &DecodeArgs) -> Result<DecodeParams> {
    let strategy = match d.strategy {
        StrategyArg::Greedy => Strategy::Greedy,
        StrategyArg::TopK => Strategy::TopK { k: d.top_k },
        StrategyArg::Nucleus => Strategy::Nucleus { p: d.top_p },
    };
    let params = DecodeParams {
        strategy,
        temperature: d.temperature,
        max_new_tokens: d.max_new_tokens,
        seed: d.decode_seed,
    };
    params.validate()?;
    Ok(params)
}

fn persona(file: &Option<PathBuf>) -> Result<Vec<String>> {
    let Some(path) = file else {
        return Ok(default_persona());
    };
    let lines: Vec<String> = fs::read_to_string(path)
        .map_err(Error::from)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyFile {
            path: path.display().to_string(),
        }
        .into());
    }
    Ok(lines)
}

fn load_model(ckpt: &Path, vocab: &Path) -> Result<(Checkpoint, Vocab)> {
    let vocab = Vocab::load(vocab)?;
    let ckpt = load_checkpoint(ckpt, Some(&vocab.fingerprint()))?;
    Ok((ckpt, vocab))
}

fn looks_like_persona_file(body: &str) -> bool {
    body.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| l.split_once(' '))
        .is_some_and(|(n, _)| n.parse::<usize>().is_ok())
}

fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let mut texts = default_persona();
    for path in &a.corpus {
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            let data = load_empathetic_csv(path)?;
            texts.extend(
                data.records
                    .into_iter()
                    .flat_map(|r| r.utterances)
                    .map(|u| u.text),
            );
            continue;
        }
        let body = fs::read_to_string(path).map_err(Error::from)?;
        if looks_like_persona_file(&body) {
            for ex in load_persona_pretraining(path, 1)? {
                texts.extend(ex.history.into_iter().map(|t| t.text));
                texts.push(ex.gold_reply);
                texts.extend(ex.persona);
            }
        } else {
            texts.extend(body.lines().map(str::to_string));
        }
    }
    let vocab = Vocab::build(&texts, a.min_freq, a.max_size)?;
    vocab.save(&a.out)?;
    println!(
        "{}",
        json!({"vocab": a.out, "size": vocab.len(), "fingerprint": vocab.fingerprint()})
    );
    Ok(())
}

fn metrics_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    })
}

/// Trains, streaming epoch records to the metrics log, then saves.
fn fit(
    mut model: ModelState<f32>,
    vocab: &Vocab,
    labels: &EmotionLabelTable,
    examples: &[DialogueExample],
    valid: Option<&[DialogueExample]>,
    cfg: &TrainConfig,
    out: &Path,
    metrics_log: &Path,
) -> Result<()> {
    let mut log = BufWriter::new(File::create(metrics_log).map_err(Error::from)?);
    let mut log_err = None;
    log::info!(
        "training on {} examples ({} parameters)",
        examples.len(),
        model.param_count()
    );
    let report = train(&mut model, vocab, examples, valid, cfg, |e: &EpochLog| {
        if log_err.is_none() {
            if let Err(err) = serde_json::to_writer(&mut log, e)
                .map_err(io::Error::from)
                .and_then(|_| writeln!(log))
            {
                log_err = Some(err);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::from(e).into());
    }
    log.flush().map_err(Error::from)?;
    save(model, vocab, labels, out)?;
    print_summary(&report, out, metrics_log);
    Ok(())
}

fn save(
    model: ModelState<f32>,
    vocab: &Vocab,
    labels: &EmotionLabelTable,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint {
        model,
        vocab_fingerprint: vocab.fingerprint(),
        emotion_labels: labels.labels().to_vec(),
    };
    save_checkpoint(&ckpt, out)?;
    Ok(())
}

fn print_summary(report: &TrainReport, out: &Path, metrics_log: &Path) {
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "metrics_log": metrics_log,
            "steps": report.steps,
            "last_epoch": report.epochs.last(),
        })
    );
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let objectives = Objectives {
        lm: !a.no_lm,
        selection: !a.no_selection,
        emotion: !a.no_emotion,
    };
    let cfg = train_config(&a.optim, objectives)?;
    let persona = persona(&a.context.persona_file)?;
    let vocab = Vocab::load(&a.vocab)?;
    let data = load_empathetic_csv(&a.data)?;
    let init = match &a.init {
        Some(p) => Some(load_checkpoint(p, Some(&vocab.fingerprint()))?),
        None => None,
    };
    let labels = match &init {
        Some(c) => EmotionLabelTable::from_labels(c.emotion_labels.clone()),
        None => data.labels.clone(),
    };
    let model = match init {
        Some(c) => c.model,
        None => ModelState::init(model_config(
            &a.model,
            vocab.len(),
            labels.len(),
            a.optim.seed,
        )?)?,
    };

    let window = a.context.history_window;
    let (train_records, valid_records) = match (&a.valid, a.split) {
        (Some(p), _) => (data.records, Some(load_empathetic_csv(p)?.records)),
        (None, true) => {
            let (t, v, _test) = split_by_conversation(&data.records, a.optim.seed);
            (t, Some(v))
        }
        (None, false) => (data.records, None),
    };
    let examples = make_examples(&train_records, &labels, &persona, window)?;
    let valid = match valid_records {
        Some(r) => Some(make_examples(&r, &labels, &persona, window)?).filter(|v| !v.is_empty()),
        None => None,
    };
    fit(
        model,
        &vocab,
        &labels,
        &examples,
        valid.as_deref(),
        &cfg,
        &a.out,
        &metrics_path(&a.metrics_log, &a.out),
    )
}

fn pretrain_persona(a: &PretrainArgs) -> Result<()> {
    let objectives = Objectives {
        lm: true,
        selection: !a.no_selection,
        emotion: false,
    };
    let cfg = train_config(&a.optim, objectives)?;
    let vocab = Vocab::load(&a.vocab)?;
    let labels = load_empathetic_csv(&a.labels_from)?.labels;
    let examples = load_persona_pretraining(&a.data, a.history_window)?;
    let model = match &a.init {
        Some(p) => {
            let c = load_checkpoint(p, Some(&vocab.fingerprint()))?;
            if c.emotion_labels != labels.labels() {
                return Err(Error::Config(format!(
                    "{} was trained with a different emotion label set than {}",
                    p.display(),
                    a.labels_from.display()
                ))
                .into());
            }
            c.model
        }
        None => ModelState::init(model_config(
            &a.model,
            vocab.len(),
            labels.len(),
            a.optim.seed,
        )?)?,
    };
    fit(
        model,
        &vocab,
        &labels,
        &examples,
        None,
        &cfg,
        &a.out,
        &metrics_path(&a.metrics_log, &a.out),
    )
}

fn eval(a: &EvalArgs) -> Result<()> {
    let params = DecodeParams::greedy(a.max_new_tokens);
    params.validate()?;
    let persona = persona(&a.context.persona_file)?;
    let (ckpt, vocab) = load_model(&a.ckpt, &a.vocab)?;
    let labels = EmotionLabelTable::from_labels(ckpt.emotion_labels.clone());
    let data = load_empathetic_csv(&a.data)?;
    let examples = make_examples(&data.records, &labels, &persona, a.context.history_window)?;
    let report = evaluate(&ckpt.model, &vocab, &examples, &params)?;
    println!("{}", report.table());
    let body = serde_json::to_string(&report).map_err(Error::from)?;
    println!("{body}");
    if let Some(path) = &a.json {
        fs::write(path, body + "\n").map_err(Error::from)?;
    }
    Ok(())
}

fn chat(a: &ChatArgs) -> Result<()> {
    let params = decode_params(&a.decode)?;
    let persona = persona(&a.context.persona_file)?;
    let (ckpt, vocab) = load_model(&a.ckpt, &a.vocab)?;
    let responder = Responder::new(ckpt, vocab, params)?;
    eprintln!("type a message; /reset clears the conversation, /quit exits");
    let mut exchanges: Vec<(String, String)> = Vec::new();
    let stdout = io::stdout();
    for line in io::stdin().lock().lines() {
        let line = line.map_err(|e| CliError::Runtime(format!("stdin: {e}")))?;
        let message = line.trim();
        match message {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                exchanges.clear();
                continue;
            }
            _ => {}
        }
        let history = dialogue_history(&exchanges, message, a.context.history_window);
        let reply = responder.respond(&persona, &history)?;
        let mut out = stdout.lock();
        writeln!(out, "caire [{}]: {}", reply.emotion, reply.text)
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Runtime(format!("stdout: {e}")))?;
        exchanges.push((message.to_string(), reply.text));
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let params = decode_params(&a.decode)?;
    if a.workers == 0 || a.queue_capacity == 0 {
        return Err(CliError::Usage(
            "--workers and --queue-capacity must be positive".into(),
        ));
    }
    let mut config = ServerConfig::new(&a.feedback);
    config.workers = a.workers;
    config.queue_capacity = a.queue_capacity;
    config.static_dir = a.static_dir.clone();
    config.persona = persona(&a.context.persona_file)?;
    config.history_window = a.context.history_window;
    config.session_snapshot = a.session_snapshot.clone();
    let (ckpt, vocab) = load_model(&a.ckpt, &a.vocab)?;
    let responder = Responder::new(ckpt, vocab, params)?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| CliError::Runtime(format!("bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let state = Arc::new(AppState::new(Arc::new(responder), &config).map_err(Error::from)?);
        println!("listening on http://{addr}");
        io::stdout().flush().ok();
        caire_server::serve(listener, state, &config)
            .await
            .map_err(|e| CliError::Runtime(format!("server: {e}")))
    })
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let objectives = Objectives {
        lm: true,
        selection: a.with_selection,
        emotion: false,
    };
    let cfg = train_config(&a.optim, objectives)?;
    let (ckpt, vocab) = load_model(&a.ckpt, &a.vocab)?;
    let export = export_feedback(&a.feedback, a.since).map_err(Error::from)?;
    log::info!(
        "feedback: {} edits, {} reports, {} unreadable lines",
        export.edits,
        export.reports,
        export.skipped_lines.len()
    );
    for item in &export.items {
        let unknown: Vec<String> = normalize(&item.revised_reply)
            .into_iter()
            .filter(|t| vocab.id(t).is_none())
            .collect();
        if !unknown.is_empty() {
            log::warn!(
                "{}: revised reply has out-of-vocabulary tokens {unknown:?}",
                item.id
            );
        }
    }
    let Checkpoint {
        mut model,
        emotion_labels,
        ..
    } = ckpt;
    let report = finetune_on_feedback(&mut model, &vocab, &export.items, &cfg)?;
    save(
        model,
        &vocab,
        &EmotionLabelTable::from_labels(emotion_labels),
        &a.out,
    )?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "items": export.items.len(),
            "reports": export.reports,
            "skipped_lines": export.skipped_lines,
            "steps": report.steps,
        })
    );
    Ok(())
}
