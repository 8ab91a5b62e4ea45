//! Joint objective `alpha * L_lm + L_sel + L_emo`, the training loop and the
//! refit on user-revised replies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_distractor, DialogueExample, Turn};
use crate::metrics;
use crate::model::{build_input, forward_with, InputEncoding, LmRows, ModelConfig, ModelState};
use crate::numerics::{AdamConfig, AdamState, Float, Gradients, Graph, Tensor, Var};
use crate::tokenizer::Vocab;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objectives {
    pub lm: bool,
    pub selection: bool,
    pub emotion: bool,
}

impl Objectives {
    pub const ALL: Self = Self {
        lm: true,
        selection: true,
        emotion: true,
    };
    pub const LM_ONLY: Self = Self {
        lm: true,
        selection: false,
        emotion: false,
    };
}

impl Default for Objectives {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the LM term only.
    pub alpha: f64,
    /// Peak learning rate, decayed linearly to zero over the run.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub objectives: Objectives,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 6.25e-5,
            batch_size: 8,
            epochs: 3,
            max_steps: None,
            grad_clip_norm: 1.0,
            seed: 0,
            objectives: Objectives::ALL,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = self.objectives;
        if !(o.lm || o.selection || o.emotion) {
            return Err(Error::Config(
                "at least one objective must be enabled".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Component losses of one step. Disabled or inapplicable objectives are
/// `None` rather than zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_lm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_emo: Option<f64>,
    pub l_total: f64,
}

impl StepLosses {
    pub fn new(l_lm: Option<f64>, l_sel: Option<f64>, l_emo: Option<f64>, alpha: f64) -> Self {
        let mut s = Self {
            l_lm,
            l_sel,
            l_emo,
            l_total: 0.0,
        };
        s.l_total = total_loss(&s, alpha);
        s
    }
}

/// `alpha * l_lm + l_sel + l_emo`; absent terms contribute nothing.
pub fn total_loss(step: &StepLosses, alpha: f64) -> f64 {
    alpha * step.l_lm.unwrap_or(0.0) + step.l_sel.unwrap_or(0.0) + step.l_emo.unwrap_or(0.0)
}

/// Targets for next-token prediction: row `i` of the logits predicts the label
/// at `i + 1`; the last row predicts nothing.
pub fn next_token_targets(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut out: Vec<Option<usize>> = labels.iter().skip(1).copied().collect();
    out.push(None);
    out
}

/// Mean next-token cross-entropy over labeled positions.
pub fn lm_loss<T: Float>(
    g: &mut Graph<'_, T>,
    lm_logits: Var,
    labels: &[Option<usize>],
) -> Result<Var> {
    g.cross_entropy(lm_logits, &next_token_targets(labels))
}

/// Two-way cross-entropy with the gold candidate as the correct class.
pub fn selection_loss<T: Float>(
    g: &mut Graph<'_, T>,
    gold_score: Var,
    distractor_score: Var,
) -> Result<Var> {
    let pair = g.concat_cols(&[gold_score, distractor_score])?;
    g.cross_entropy(pair, &[Some(0)])
}

/// Cross-entropy against the label, or `None` when the example has none.
pub fn emotion_loss<T: Float>(
    g: &mut Graph<'_, T>,
    emotion_logits: Var,
    label: Option<usize>,
) -> Result<Option<Var>> {
    label
        .map(|l| g.cross_entropy(emotion_logits, &[Some(l)]))
        .transpose()
}

/// Loss graph of one example: the scalar to differentiate and its components.
pub fn example_loss<'p, T: Float>(
    g: &mut Graph<'p, T>,
    config: &ModelConfig,
    params: &'p [Tensor<T>],
    gold: &InputEncoding,
    distractor: Option<&InputEncoding>,
    emotion: Option<usize>,
    objectives: Objectives,
    alpha: f64,
) -> Result<(Var, StepLosses)> {
    let lm_rows = if objectives.lm {
        LmRows::All
    } else {
        LmRows::None
    };
    let out = forward_with(config, params, g, gold, lm_rows)?;
    let mut terms = Vec::new();

    let l_lm = match out.lm_logits {
        Some(logits) => {
            let l = lm_loss(g, logits, &gold.lm_labels)?;
            terms.push(g.scale(l, T::lit(alpha)));
            Some(g.scalar(l).as_f64())
        }
        None => None,
    };
    let l_sel = match (objectives.selection, distractor) {
        (true, Some(d)) => {
            let other = forward_with(config, params, g, d, LmRows::None)?;
            let l = selection_loss(g, out.selection, other.selection)?;
            terms.push(l);
            Some(g.scalar(l).as_f64())
        }
        (true, None) => {
            return Err(Error::Config(
                "selection objective needs a distractor".into(),
            ))
        }
        _ => None,
    };
    let l_emo = match emotion_loss(g, out.emotion, emotion.filter(|_| objectives.emotion))? {
        Some(l) => {
            terms.push(l);
            Some(g.scalar(l).as_f64())
        }
        None => None,
    };

    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::NoLabeledPositions);
    };
    let mut total = first;
    for &t in rest {
        total = g.add(total, t)?;
    }
    Ok((total, StepLosses::new(l_lm, l_sel, l_emo, alpha)))
}

/// Gold and (if selection is on) distractor encodings of one example.
pub fn encode_pair(
    example: &DialogueExample,
    distractor: Option<&str>,
    vocab: &Vocab,
    n_positions: usize,
) -> Result<(InputEncoding, Option<InputEncoding>)> {
    let gold = build_input(
        &example.persona,
        &example.history,
        &example.gold_reply,
        true,
        vocab,
        n_positions,
    )?;
    let other = distractor
        .map(|d| {
            build_input(
                &example.persona,
                &example.history,
                d,
                false,
                vocab,
                n_positions,
            )
        })
        .transpose()?;
    Ok((gold, other))
}

/// Per-epoch record: mean step losses and validation perplexity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_lm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_emo: Option<f64>,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_ppl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub step_losses: Vec<StepLosses>,
    pub epochs: Vec<EpochLog>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn mean_losses(steps: &[StepLosses], alpha: f64) -> StepLosses {
    StepLosses::new(
        mean_of(steps.iter().map(|s| s.l_lm)),
        mean_of(steps.iter().map(|s| s.l_sel)),
        mean_of(steps.iter().map(|s| s.l_emo)),
        alpha,
    )
}

/// Trains `model` in place. Every step samples one distractor per example,
/// forwards the gold and distractor sequences, backpropagates the joint loss,
/// clips the global gradient norm and applies Adam. `on_epoch` sees each
/// epoch record as soon as it is complete.
pub fn train(
    model: &mut ModelState<f32>,
    vocab: &Vocab,
    examples: &[DialogueExample],
    valid: Option<&[DialogueExample]>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let objectives = config.objectives;
    let mcfg = model.config().clone();
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let planned = steps_per_epoch * config.epochs;
    let total_steps = config.max_steps.map_or(planned, |m| m.min(planned));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let epoch_start = report.step_losses.len();
        for batch in order.chunks(config.batch_size) {
            let step = report.steps;
            let mut grads = Gradients::default();
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &examples[i];
                let distractor = if objectives.selection {
                    Some(sample_distractor(examples, ex, &mut rng)?)
                } else {
                    None
                };
                let (gold, other) = encode_pair(ex, distractor, vocab, mcfg.n_positions)?;
                let mut g = Graph::train(rng.random());
                let (loss, parts_i) = example_loss(
                    &mut g,
                    &mcfg,
                    model.params(),
                    &gold,
                    other.as_ref(),
                    ex.emotion,
                    objectives,
                    config.alpha,
                )?;
                if !parts_i.l_total.is_finite() {
                    return Err(Error::Diverged { step });
                }
                grads.add_assign(&g.backward(loss)?);
                parts.push(parts_i);
            }
            grads.scale(1.0 / batch.len() as f32);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged { step });
            }
            if norm > config.grad_clip_norm {
                grads.scale((config.grad_clip_norm / norm) as f32);
            }
            let lr = config.lr * (1.0 - step as f64 / total_steps as f64);
            let (params, names) = model.params_and_names_mut();
            adam.step(params, names, &grads, &config.adam, lr)
                .map_err(|e| match e {
                    Error::NonFiniteGradient(_) => Error::Diverged { step },
                    other => other,
                })?;
            report.step_losses.push(mean_losses(&parts, config.alpha));
            report.steps += 1;
            if report.steps == total_steps {
                break;
            }
        }
        let summary = mean_losses(&report.step_losses[epoch_start..], config.alpha);
        let valid_ppl = match valid {
            Some(v) if !v.is_empty() => Some(metrics::perplexity(model, vocab, v)?),
            _ => None,
        };
        let log = EpochLog {
            epoch,
            l_lm: summary.l_lm,
            l_sel: summary.l_sel,
            l_emo: summary.l_emo,
            l_total: summary.l_total,
            valid_ppl,
        };
        log::info!("epoch {epoch}: {}", serde_json::to_string(&log)?);
        on_epoch(&log);
        report.epochs.push(log);
        if report.steps == total_steps {
            break;
        }
    }
    Ok(report)
}

/// A user-revised reply with the context it answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImitationItem {
    /// Stable identifier used in error messages, e.g. `session:turn`.
    pub id: String,
    pub persona: Vec<String>,
    pub history: Vec<Turn>,
    pub revised_reply: String,
}

/// Supervised refit on revised replies. The LM objective always runs; the
/// selection objective runs when enabled in `config` and at least two items
/// exist; emotion is never trained here. An empty item set leaves the model
/// untouched.
pub fn finetune_on_feedback(
    model: &mut ModelState<f32>,
    vocab: &Vocab,
    items: &[ImitationItem],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if items.is_empty() {
        log::warn!("no feedback records to learn from; model unchanged");
        return Ok(TrainReport::default());
    }
    let mut examples = Vec::with_capacity(items.len());
    for item in items {
        if item.history.is_empty() {
            return Err(Error::InvalidRecord {
                id: item.id.clone(),
                reason: "missing dialogue history".into(),
            });
        }
        if item.revised_reply.trim().is_empty() {
            return Err(Error::InvalidRecord {
                id: item.id.clone(),
                reason: "empty revised reply".into(),
            });
        }
        examples.push(DialogueExample {
            conv_id: item.id.clone(),
            persona: item.persona.clone(),
            history: item.history.clone(),
            gold_reply: item.revised_reply.clone(),
            emotion: None,
        });
    }
    let mut cfg = config.clone();
    cfg.objectives = Objectives {
        lm: true,
        selection: config.objectives.selection && items.len() >= 2,
        emotion: false,
    };
    train(model, vocab, &examples, None, &cfg, |_| {})
}
