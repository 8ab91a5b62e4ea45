//! Reply decoding and context-only emotion prediction over a frozen model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::model::{build_context, Checkpoint, LmRows, ModelState};
use crate::numerics::Float;
use crate::tokenizer::{Vocab, EOS, RESERVED};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK { k: usize },
    Nucleus { p: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    #[serde(flatten)]
    pub strategy: Strategy,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodeParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    /// Top-k 40 at temperature 0.7.
    pub fn serving() -> Self {
        Self {
            strategy: Strategy::TopK { k: 40 },
            temperature: 0.7,
            max_new_tokens: 40,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        match self.strategy {
            Strategy::TopK { k: 0 } => Err(Error::Config("top-k needs k >= 1".into())),
            Strategy::Nucleus { p } if !(p > 0.0 && p <= 1.0) => Err(Error::Config(format!(
                "nucleus p must be in (0, 1], got {p}"
            ))),
            _ => Ok(()),
        }
    }
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self::serving()
    }
}

/// Lowest index among the maxima.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Chooses the next token id from masked logits.
fn pick<R: Rng>(logits: &[f64], params: &DecodeParams, rng: &mut R) -> usize {
    if params.strategy == Strategy::Greedy {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / params.temperature).collect();
    let probs = softmax_f64(&scaled);
    let mut ranked: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let keep = match params.strategy {
        Strategy::TopK { k } => k.min(ranked.len()),
        Strategy::Nucleus { p } => {
            let mut acc = 0.0;
            let mut n = 0;
            for &i in &ranked {
                acc += probs[i];
                n += 1;
                if acc >= p {
                    break;
                }
            }
            n
        }
        Strategy::Greedy => unreachable!(),
    };
    let kept = &ranked[..keep.max(1)];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &i in kept {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *kept.last().expect("non-empty")
}

/// Decodes a reply to `history`. Special tokens other than `<eos>` are never
/// emitted; decoding stops at `<eos>`, after `max_new_tokens`, or when the
/// position table is full.
pub fn generate<T: Float>(
    model: &ModelState<T>,
    vocab: &Vocab,
    persona: &[String],
    history: &[Turn],
    params: &DecodeParams,
) -> Result<String> {
    params.validate()?;
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let n_positions = model.config().n_positions;
    let mut enc = build_context(persona, history, vocab, n_positions, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut reply = Vec::new();
    while reply.len() < params.max_new_tokens && enc.len() < n_positions {
        let out = model.infer(&enc, LmRows::Last)?;
        let mut logits: Vec<f64> = out
            .lm_logits
            .expect("requested")
            .data()
            .iter()
            .map(|x| x.as_f64())
            .collect();
        for (id, l) in logits.iter_mut().enumerate().take(RESERVED.len()) {
            if id != EOS {
                *l = f64::NEG_INFINITY;
            }
        }
        let next = pick(&logits, params, &mut rng);
        if next == EOS {
            break;
        }
        reply.push(next);
        enc.push_bot_token(next);
    }
    vocab.decode(&reply)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionPrediction {
    pub label_id: usize,
    pub probabilities: Vec<f64>,
}

/// Softmax of the emotion head read at the reply-opening `<bot>` of the bare
/// context.
pub fn classify_emotion<T: Float>(
    model: &ModelState<T>,
    vocab: &Vocab,
    persona: &[String],
    history: &[Turn],
) -> Result<EmotionPrediction> {
    let enc = build_context(persona, history, vocab, model.config().n_positions, 0)?;
    let out = model.infer(&enc, LmRows::None)?;
    let logits: Vec<f64> = out.emotion_logits.iter().map(|x| x.as_f64()).collect();
    let probabilities = softmax_f64(&logits);
    Ok(EmotionPrediction {
        label_id: argmax(&probabilities),
        probabilities,
    })
}

/// Model history for a new user `message` after the earlier `(user, bot)`
/// exchanges: the last `window` utterances, oldest first.
pub fn dialogue_history(exchanges: &[(String, String)], message: &str, window: usize) -> Vec<Turn> {
    let mut turns: Vec<Turn> = exchanges
        .iter()
        .flat_map(|(u, b)| [Turn::user(u.clone()), Turn::bot(b.clone())])
        .collect();
    turns.push(Turn::user(message));
    let skip = turns.len().saturating_sub(window.max(1));
    turns.split_off(skip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
    pub emotion: String,
    pub emotion_id: usize,
}

/// Everything needed to answer a context: shared by the terminal chat and the
/// HTTP server so both produce the same replies.
#[derive(Clone, Debug)]
pub struct Responder {
    checkpoint: Checkpoint,
    vocab: Vocab,
    params: DecodeParams,
}

impl Responder {
    /// Fails if the checkpoint was trained against a different vocabulary.
    pub fn new(checkpoint: Checkpoint, vocab: Vocab, params: DecodeParams) -> Result<Self> {
        params.validate()?;
        let found = vocab.fingerprint();
        if found != checkpoint.vocab_fingerprint {
            return Err(Error::VocabMismatch {
                expected: found,
                found: checkpoint.vocab_fingerprint,
            });
        }
        Ok(Self {
            checkpoint,
            vocab,
            params,
        })
    }

    pub fn params(&self) -> &DecodeParams {
        &self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn respond(&self, persona: &[String], history: &[Turn]) -> Result<Reply> {
        let model = &self.checkpoint.model;
        let text = generate(model, &self.vocab, persona, history, &self.params)?;
        let emotion = classify_emotion(model, &self.vocab, persona, history)?;
        let label = self
            .checkpoint
            .emotion_labels
            .get(emotion.label_id)
            .cloned()
            .unwrap_or_else(|| emotion.label_id.to_string());
        Ok(Reply {
            text,
            emotion: label,
            emotion_id: emotion.label_id,
        })
    }
}
