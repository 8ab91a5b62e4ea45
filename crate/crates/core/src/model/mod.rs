//! Causal transformer decoder with three input embeddings and three heads.
//!
//! Word, position and dialogue-state embeddings are summed at the input. Blocks
//! are post-norm (`x = LN(x + attn(x)); x = LN(x + mlp(x))`). The LM head is the
//! transposed word-embedding table, the selection head reads the hidden state at
//! `sen_index` and the emotion head reads it at `emo_index`.

mod checkpoint;
mod encoding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Float, Graph, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use encoding::{
    build_context, build_input, InputEncoding, N_DIALOGUE_STATES, STATE_BOT, STATE_PERSONA,
    STATE_USER,
};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_positions: usize,
    pub n_dialogue_states: usize,
    pub n_emotions: usize,
    pub dropout: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128, 256 positions.
    pub fn desk(vocab_size: usize, n_emotions: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size,
            n_positions: 256,
            n_dialogue_states: N_DIALOGUE_STATES,
            n_emotions,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer counts and widths must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.n_positions == 0 || self.n_emotions == 0 {
            return fail("vocab_size, n_positions and n_emotions must be positive".into());
        }
        if self.n_dialogue_states != N_DIALOGUE_STATES {
            return fail(format!("n_dialogue_states must be {N_DIALOGUE_STATES}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// Per-block parameter offsets.
const W_Q: usize = 0;
const B_Q: usize = 1;
const W_K: usize = 2;
const B_K: usize = 3;
const W_V: usize = 4;
const B_V: usize = 5;
const W_O: usize = 6;
const B_O: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W_FC: usize = 10;
const B_FC: usize = 11;
const W_PROJ: usize = 12;
const B_PROJ: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;
const PER_BLOCK: usize = 16;

const BLOCK_NAMES: [&str; PER_BLOCK] = [
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln1_g", "ln1_b", "w_fc", "b_fc",
    "w_proj", "b_proj", "ln2_g", "ln2_b",
];

/// Parameter slot of the word-embedding table, which doubles as the LM head.
pub const SLOT_WORD_EMBEDDING: usize = 0;
const SLOT_POSITION: usize = 1;
const SLOT_STATE: usize = 2;
const FIRST_BLOCK: usize = 3;

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zero,
    One,
}

fn block_slot(layer: usize, offset: usize) -> usize {
    FIRST_BLOCK + layer * PER_BLOCK + offset
}

/// Names, shapes and initializers of every parameter, in slot order.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        (
            "word_embedding".to_string(),
            vec![c.vocab_size, d],
            Init::Normal,
        ),
        (
            "position_embedding".to_string(),
            vec![c.n_positions, d],
            Init::Normal,
        ),
        (
            "state_embedding".to_string(),
            vec![c.n_dialogue_states, d],
            Init::Normal,
        ),
    ];
    for l in 0..c.n_layers {
        for (off, name) in BLOCK_NAMES.iter().enumerate() {
            let (shape, init) = match off {
                W_Q | W_K | W_V | W_O => (vec![d, d], Init::Normal),
                W_FC => (vec![d, f], Init::Normal),
                W_PROJ => (vec![f, d], Init::Normal),
                B_FC => (vec![f], Init::Zero),
                LN1_G | LN2_G => (vec![d], Init::One),
                _ => (vec![d], Init::Zero),
            };
            out.push((format!("blocks.{l}.{name}"), shape, init));
        }
    }
    out.push(("selection_head.weight".into(), vec![d, 1], Init::Normal));
    out.push(("selection_head.bias".into(), vec![1], Init::Zero));
    out.push((
        "emotion_head.weight".into(),
        vec![d, c.n_emotions],
        Init::Normal,
    ));
    out.push(("emotion_head.bias".into(), vec![c.n_emotions], Init::Zero));
    out
}

/// Which rows of the LM logits to materialize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmRows {
    All,
    Last,
    None,
}

/// Graph handles for the three heads of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub lm_logits: Option<Var>,
    /// `1×1` response-selection score.
    pub selection: Var,
    /// `1×n_emotions` emotion logits.
    pub emotion: Var,
}

/// Materialized outputs of an eval-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub lm_logits: Option<Tensor<T>>,
    pub selection_score: T,
    pub emotion_logits: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Float> ModelState<T> {
    /// Weights ~ N(0, 0.02), biases 0, layer-norm gains 1; deterministic in
    /// `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                Init::Zero => vec![T::zero(); n],
                Init::One => vec![T::one(); n],
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            params,
            names,
        })
    }

    /// Reassembles a state from named tensors, checking them against the layout.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        let mut names = Vec::with_capacity(named.len());
        for ((want_name, want_shape, _), (name, t)) in expected.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` {:?} does not match expected `{want_name}` {want_shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
            names.push(name);
        }
        Ok(Self {
            config,
            params,
            names,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
        }
    }

    /// Split borrow for optimizers: parameters and their names.
    pub fn params_and_names_mut(&mut self) -> (&mut [Tensor<T>], &[String]) {
        (&mut self.params, &self.names)
    }

    /// Records the forward pass on `g`. Dropout is active iff `g` is a
    /// training graph.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        enc: &InputEncoding,
        lm: LmRows,
    ) -> Result<ForwardVars> {
        forward_with(&self.config, &self.params, g, enc, lm)
    }

    /// Eval-mode forward pass with outputs copied out of the graph.
    pub fn infer(&self, enc: &InputEncoding, lm: LmRows) -> Result<ModelOutput<T>> {
        let mut g = Graph::eval();
        let out = self.forward(&mut g, enc, lm)?;
        Ok(ModelOutput {
            lm_logits: out.lm_logits.map(|v| g.tensor(v)),
            selection_score: g.scalar(out.selection),
            emotion_logits: g.value(out.emotion).to_vec(),
        })
    }
}

/// Forward pass over an explicit parameter list laid out as in
/// [`ModelState`]. Records on `g`; Dropout is active iff `g` is a
/// training graph.
pub fn forward_with<'p, T: Float>(
    c: &ModelConfig,
    params: &'p [Tensor<T>],
    g: &mut Graph<'p, T>,
    enc: &InputEncoding,
    lm: LmRows,
) -> Result<ForwardVars> {
    let expected = FIRST_BLOCK + c.n_layers * PER_BLOCK + 4;
    if params.len() != expected {
        return Err(Error::Config(format!(
            "expected {expected} parameter tensors, got {}",
            params.len()
        )));
    }
    let p = |g: &mut Graph<'p, T>, slot: usize| g.param(slot, &params[slot]);
    let len = enc.len();
    if len > c.n_positions {
        return Err(Error::InputTooLong {
            len,
            max: c.n_positions,
        });
    }
    if len == 0 || enc.position_ids.len() != len || enc.state_ids.len() != len {
        return Err(Error::InvalidTensor(
            "encoding sequences differ in length".into(),
        ));
    }
    if enc.sen_index >= len || enc.emo_index >= len {
        return Err(Error::InvalidTensor(
            "readout index outside the sequence".into(),
        ));
    }
    let p_drop = c.dropout as f64;

    let wte = p(g, SLOT_WORD_EMBEDDING);
    let wpe = p(g, SLOT_POSITION);
    let wse = p(g, SLOT_STATE);
    let tok = g.embedding(wte, &enc.token_ids)?;
    let pos = g.embedding(wpe, &enc.position_ids)?;
    let st = g.embedding(wse, &enc.state_ids)?;
    let x = g.add(tok, pos)?;
    let x = g.add(x, st)?;
    let mut x = g.dropout(x, p_drop);

    let hd = c.head_dim();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    for l in 0..c.n_layers {
        let w = |off| block_slot(l, off);
        let (wq, bq) = (p(g, w(W_Q)), p(g, w(B_Q)));
        let (wk, bk) = (p(g, w(W_K)), p(g, w(B_K)));
        let (wv, bv) = (p(g, w(W_V)), p(g, w(B_V)));
        let q = g.linear(x, wq, bq)?;
        let k = g.linear(x, wk, bk)?;
        let v = g.linear(x, wv, bv)?;
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let probs = g.causal_softmax(scores, scale)?;
            let probs = g.dropout(probs, p_drop);
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        let (wo, bo) = (p(g, w(W_O)), p(g, w(B_O)));
        let attn = g.linear(merged, wo, bo)?;
        let attn = g.dropout(attn, p_drop);
        let res = g.add(x, attn)?;
        let (g1, b1) = (p(g, w(LN1_G)), p(g, w(LN1_B)));
        x = g.layer_norm(res, g1, b1)?;

        let (wfc, bfc) = (p(g, w(W_FC)), p(g, w(B_FC)));
        let (wpr, bpr) = (p(g, w(W_PROJ)), p(g, w(B_PROJ)));
        let hidden = g.linear(x, wfc, bfc)?;
        let hidden = g.gelu(hidden);
        let out = g.linear(hidden, wpr, bpr)?;
        let out = g.dropout(out, p_drop);
        let res = g.add(x, out)?;
        let (g2, b2) = (p(g, w(LN2_G)), p(g, w(LN2_B)));
        x = g.layer_norm(res, g2, b2)?;
    }

    let heads_base = FIRST_BLOCK + c.n_layers * PER_BLOCK;
    let sen = g.select_rows(x, &[enc.sen_index])?;
    let (sw, sb) = (p(g, heads_base), p(g, heads_base + 1));
    let selection = g.linear(sen, sw, sb)?;
    let emo = g.select_rows(x, &[enc.emo_index])?;
    let (ew, eb) = (p(g, heads_base + 2), p(g, heads_base + 3));
    let emotion = g.linear(emo, ew, eb)?;

    let lm_logits = match lm {
        LmRows::All => Some(g.matmul_nt(x, wte)?),
        LmRows::Last => {
            let last = g.select_rows(x, &[len - 1])?;
            Some(g.matmul_nt(last, wte)?)
        }
        LmRows::None => None,
    };
    Ok(ForwardVars {
        lm_logits,
        selection,
        emotion,
    })
}
