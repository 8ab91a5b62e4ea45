use std::path::PathBuf;

use caire_core::corpus::{
    default_persona, load_empathetic_csv, make_examples, DialogueExample, Turn,
};
use caire_core::model::{ModelConfig, ModelState, SLOT_WORD_EMBEDDING};
use caire_core::numerics::{grad_check, GradCheckConfig, Graph, Tensor};
use caire_core::tokenizer::Vocab;
use caire_core::trainer::{
    encode_pair, example_loss, finetune_on_feedback, train, ImitationItem, Objectives, TrainConfig,
};
use caire_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

struct Setup {
    examples: Vec<DialogueExample>,
    vocab: Vocab,
    n_emotions: usize,
}

fn setup() -> Setup {
    let data = load_empathetic_csv(fixture("empathetic_32.csv")).unwrap();
    let examples = make_examples(&data.records, &data.labels, &default_persona(), 3).unwrap();
    let texts = examples
        .iter()
        .flat_map(|e| {
            e.history
                .iter()
                .map(|t| t.text.clone())
                .chain([e.gold_reply.clone()])
        })
        .chain(default_persona());
    let vocab = Vocab::build(texts, 1, 5000).unwrap();
    Setup {
        examples,
        vocab,
        n_emotions: data.labels.len(),
    }
}

fn tiny(vocab: usize, emotions: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        n_positions: 128,
        n_dialogue_states: 3,
        n_emotions: emotions,
        dropout: 0.1,
        seed: 2,
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        epochs: 100,
        max_steps: Some(steps),
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let s = setup();
    let m = ModelState::<f64>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
    let ex = &s.examples[0];
    let (gold, other) = encode_pair(ex, Some(&s.examples[9].gold_reply), &s.vocab, 128).unwrap();
    for alpha in [0.0, 0.5, 1.0, 2.0] {
        let mut g = Graph::eval();
        let (loss, parts) = example_loss(
            &mut g,
            m.config(),
            m.params(),
            &gold,
            other.as_ref(),
            ex.emotion,
            Objectives::ALL,
            alpha,
        )
        .unwrap();
        let expected = alpha * parts.l_lm.unwrap() + parts.l_sel.unwrap() + parts.l_emo.unwrap();
        assert_eq!(parts.l_total, expected);
        assert!((g.scalar(loss) - expected).abs() < 1e-12);
    }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let s = setup();
    let cfg = tiny(s.vocab.len(), s.n_emotions);
    let m = ModelState::<f64>::init(cfg.clone()).unwrap();
    let ex = &s.examples[4];
    let (gold, other) = encode_pair(ex, Some(&s.examples[20].gold_reply), &s.vocab, 128).unwrap();
    let loss_of = |params: &[Tensor<f64>]| {
        let mut g = Graph::train(17);
        let (loss, _) = example_loss(
            &mut g,
            &cfg,
            params,
            &gold,
            other.as_ref(),
            ex.emotion,
            Objectives::ALL,
            1.0,
        )?;
        Ok((g.scalar(loss), g.backward(loss)?))
    };
    let (_, grads) = loss_of(m.params()).unwrap();
    let analytic: Vec<Vec<f64>> = (0..m.params().len())
        .map(|i| {
            grads
                .get(i)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; m.params()[i].len()])
        })
        .collect();
    let report = grad_check(
        m.params(),
        &analytic,
        &GradCheckConfig {
            samples_per_tensor: 16,
            ..GradCheckConfig::default()
        },
        |p| loss_of(p).map(|(l, _)| l),
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let s = setup();
    let run = || {
        let mut m = ModelState::<f32>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
        let r = train(&mut m, &s.vocab, &s.examples, None, &quick(6), |_| {}).unwrap();
        (r.step_losses, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn disabled_objectives_are_absent_from_logs() {
    let s = setup();
    let mut m = ModelState::<f32>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
    let mut cfg = quick(8);
    cfg.objectives = Objectives::LM_ONLY;
    let r = train(
        &mut m,
        &s.vocab,
        &s.examples,
        Some(&s.examples[..4]),
        &cfg,
        |_| {},
    )
    .unwrap();
    let log = &r.epochs[0];
    assert!(log.l_lm.is_some() && log.l_sel.is_none() && log.l_emo.is_none());
    assert!(log.valid_ppl.unwrap() > 1.0);
    let line = serde_json::to_string(log).unwrap();
    assert!(!line.contains("l_sel") && !line.contains("l_emo"), "{line}");
}

#[test]
fn unlabeled_examples_skip_the_emotion_objective() {
    let s = setup();
    let unlabeled: Vec<DialogueExample> = s
        .examples
        .iter()
        .cloned()
        .map(|e| DialogueExample { emotion: None, ..e })
        .collect();
    let mut m = ModelState::<f32>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
    let r = train(&mut m, &s.vocab, &unlabeled, None, &quick(3), |_| {}).unwrap();
    assert!(r
        .step_losses
        .iter()
        .all(|l| l.l_emo.is_none() && l.l_sel.is_some()));
}

#[test]
fn reply_tokens_get_gradient_without_the_lm_term() {
    let s = setup();
    let m = ModelState::<f64>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
    // "raccoon" appears only in a reply, never in the context below.
    let ex = DialogueExample {
        conv_id: "a".into(),
        persona: vec![],
        history: vec![Turn::user("what was it ?")],
        gold_reply: "a raccoon".into(),
        emotion: Some(0),
    };
    let (gold, other) = encode_pair(&ex, Some("that is great ."), &s.vocab, 128).unwrap();
    let mut g = Graph::eval();
    let (loss, _) = example_loss(
        &mut g,
        m.config(),
        m.params(),
        &gold,
        other.as_ref(),
        ex.emotion,
        Objectives::ALL,
        0.0,
    )
    .unwrap();
    let grads = g.backward(loss).unwrap();
    let row = s.vocab.id("raccoon").unwrap();
    let d = m.config().d_model;
    let wte = grads.get(SLOT_WORD_EMBEDDING).unwrap();
    assert!(wte[row * d..(row + 1) * d].iter().any(|v| *v != 0.0));
}

#[test]
fn training_loss_falls() {
    let s = setup();
    let mut m = ModelState::<f32>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
    let mut cfg = quick(80);
    cfg.batch_size = 8;
    let r = train(&mut m, &s.vocab, &s.examples, None, &cfg, |_| {}).unwrap();
    assert_eq!(r.epochs.len(), 20);
    assert!(r.epochs[9].l_total < r.epochs[0].l_total, "{:?}", r.epochs);
}

#[test]
fn nan_parameters_abort_with_step_index() {
    let s = setup();
    let mut m = ModelState::<f32>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
    m.params_mut()[SLOT_WORD_EMBEDDING]
        .data_mut()
        .fill(f32::NAN);
    let err = train(&mut m, &s.vocab, &s.examples, None, &quick(3), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0 }), "{err}");
}

#[test]
fn feedback_refit_edge_cases() {
    let s = setup();
    let mut m = ModelState::<f32>::init(tiny(s.vocab.len(), s.n_emotions)).unwrap();
    let before = m.clone();
    let r = finetune_on_feedback(&mut m, &s.vocab, &[], &quick(5)).unwrap();
    assert_eq!(r.steps, 0);
    assert_eq!(m, before);

    let item = ImitationItem {
        id: "s1:3".into(),
        persona: default_persona(),
        history: vec![],
        revised_reply: "i would never do that".into(),
    };
    let err = finetune_on_feedback(&mut m, &s.vocab, &[item], &quick(5)).unwrap_err();
    assert!(err.to_string().contains("s1:3"), "{err}");
    assert_eq!(m, before);
}
