//! Perplexity, corpus BLEU, emotion and selection accuracy, and the
//! evaluation driver that combines them.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_distractor, DialogueExample};
use crate::generator::{classify_emotion, generate, DecodeParams};
use crate::model::{build_input, LmRows, ModelState};
use crate::numerics::Float;
use crate::tokenizer::{normalize, normalize_text, Vocab};
use crate::trainer::{encode_pair, next_token_targets};
use crate::{Error, Result};

/// Summed next-token negative log-likelihood over gold-reply positions and
/// the number of positions scored.
pub fn reply_nll<T: Float>(
    model: &ModelState<T>,
    vocab: &Vocab,
    example: &DialogueExample,
) -> Result<(f64, usize)> {
    let enc = build_input(
        &example.persona,
        &example.history,
        &example.gold_reply,
        true,
        vocab,
        model.config().n_positions,
    )?;
    let logits = model
        .infer(&enc, LmRows::All)?
        .lm_logits
        .expect("requested");
    let mut nll = 0.0;
    let mut count = 0;
    for (row, target) in next_token_targets(&enc.lm_labels).into_iter().enumerate() {
        let Some(t) = target else { continue };
        let x: Vec<f64> = logits.row(row).iter().map(|v| v.as_f64()).collect();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - x[t];
        count += 1;
    }
    Ok((nll, count))
}

/// Corpus-level perplexity: `exp(total NLL / total scored tokens)`.
pub fn perplexity<T: Float>(
    model: &ModelState<T>,
    vocab: &Vocab,
    examples: &[DialogueExample],
) -> Result<f64> {
    let (nll, count) = examples.iter().try_fold((0.0, 0usize), |(s, n), ex| {
        reply_nll(model, vocab, ex).map(|(a, b)| (s + a, n + b))
    })?;
    if count == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok((nll / count as f64).exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram totals per order, plus the
/// candidate and reference lengths, pooled over the corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn collect<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, R)], max_order: usize) -> Self {
        let mut s = Self {
            matches: vec![0; max_order],
            totals: vec![0; max_order],
            ..Self::default()
        };
        for (c, r) in pairs {
            let cand = normalize(c.as_ref());
            let refr = normalize(r.as_ref());
            s.candidate_len += cand.len();
            s.reference_len += refr.len();
            for n in 1..=max_order {
                let rc = ngram_counts(&refr, n);
                for (gram, count) in ngram_counts(&cand, n) {
                    s.matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                    s.totals[n - 1] += count;
                }
            }
        }
        s
    }

    /// Cumulative BLEU-`k` in `[0, 100]`. Orders `n >= 2` with no matches use
    /// `(0 + 1) / (total + 1)`.
    pub fn bleu(&self, k: usize) -> f64 {
        if self.candidate_len == 0 || k == 0 || k > self.matches.len() || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..k {
            let p = if n > 0 && self.matches[n] == 0 {
                1.0 / (self.totals[n] + 1) as f64
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_sum / k as f64).exp()
    }
}

/// Corpus BLEU-`max_order` of `(candidate, reference)` pairs, in `[0, 100]`.
pub fn corpus_bleu<C: AsRef<str>, R: AsRef<str>>(
    pairs: &[(C, R)],
    max_order: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok(BleuStats::collect(pairs, max_order).bleu(max_order))
}

pub fn bleu(candidate: &str, reference: &str, max_order: usize) -> f64 {
    BleuStats::collect(&[(candidate, reference)], max_order).bleu(max_order)
}

/// Mean of corpus BLEU-1 through BLEU-4, in `[0, 100]`.
pub fn avg_bleu<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, R)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let stats = BleuStats::collect(pairs, 4);
    Ok((1..=4).map(|k| stats.bleu(k)).sum::<f64>() / 4.0)
}

pub fn emotion_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of examples whose gold reply outscores a seeded distractor.
/// Ties count as errors.
pub fn selection_accuracy<T: Float>(
    model: &ModelState<T>,
    vocab: &Vocab,
    examples: &[DialogueExample],
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for ex in examples {
        let d = sample_distractor(examples, ex, &mut rng)?;
        let (gold, other) = encode_pair(ex, Some(d), vocab, model.config().n_positions)?;
        let sg = model.infer(&gold, LmRows::None)?.selection_score;
        let sd = model
            .infer(&other.expect("requested"), LmRows::None)?
            .selection_score;
        if sg > sd {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub avg_bleu: f64,
    /// Corpus BLEU-1..4.
    pub bleu: [f64; 4],
    /// Absent when no example carries an emotion label.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub emo_acc: Option<f64>,
    /// Fraction of generations equal to the normalized gold reply.
    pub exact_match: f64,
    pub examples: usize,
    pub tokens: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<12} {:>10.4}", "ppl", self.ppl);
        let _ = writeln!(s, "{:<12} {:>10.2}", "avg_bleu", self.avg_bleu);
        for (k, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(s, "{:<12} {:>10.2}", format!("bleu-{}", k + 1), b);
        }
        match self.emo_acc {
            Some(a) => {
                let _ = writeln!(s, "{:<12} {:>10.4}", "emo_acc", a);
            }
            None => {
                let _ = writeln!(s, "{:<12} {:>10}", "emo_acc", "n/a");
            }
        }
        let _ = writeln!(s, "{:<12} {:>10.4}", "exact_match", self.exact_match);
        let _ = writeln!(s, "{:<12} {:>10}", "examples", self.examples);
        let _ = write!(s, "{:<12} {:>10}", "tokens", self.tokens);
        s
    }
}

/// Perplexity on gold replies, BLEU and exact match of decoded replies, and
/// accuracy of context-only emotion predictions.
pub fn evaluate<T: Float>(
    model: &ModelState<T>,
    vocab: &Vocab,
    examples: &[DialogueExample],
    params: &DecodeParams,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut pairs = Vec::with_capacity(examples.len());
    let mut exact = 0;
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for ex in examples {
        let (n, c) = reply_nll(model, vocab, ex)?;
        nll += n;
        tokens += c;
        let hyp = generate(model, vocab, &ex.persona, &ex.history, params)?;
        if hyp == normalize_text(&ex.gold_reply) {
            exact += 1;
        }
        pairs.push((hyp, ex.gold_reply.clone()));
        if let Some(label) = ex.emotion {
            preds.push(classify_emotion(model, vocab, &ex.persona, &ex.history)?.label_id);
            golds.push(label);
        }
    }
    let stats = BleuStats::collect(&pairs, 4);
    let bleu = [stats.bleu(1), stats.bleu(2), stats.bleu(3), stats.bleu(4)];
    Ok(EvalReport {
        ppl: (nll / tokens as f64).exp(),
        avg_bleu: bleu.iter().sum::<f64>() / 4.0,
        bleu,
        emo_acc: if golds.is_empty() {
            None
        } else {
            Some(emotion_accuracy(&preds, &golds)?)
        },
        exact_match: exact as f64 / examples.len() as f64,
        examples: examples.len(),
        tokens,
    })
}
