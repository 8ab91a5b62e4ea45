use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Turn};
use crate::tokenizer::{Vocab, BOS, EOS, PERSONA, SPK_BOT, SPK_USER};
use crate::{Error, Result};

/// Dialogue-state ids summed into the input as a third embedding.
pub const STATE_PERSONA: usize = 0;
pub const STATE_USER: usize = 1;
pub const STATE_BOT: usize = 2;
pub const N_DIALOGUE_STATES: usize = 3;

/// Parallel id sequences for one model input.
///
/// Layout: `<bos> <persona> persona… (<user>|<bot> turn…)* <bot> reply… <eos>`.
/// `lm_labels[i]` is the token the model should emit after reading position
/// `i - 1`; it is `None` everywhere except the gold reply and its `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEncoding {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub state_ids: Vec<usize>,
    pub lm_labels: Vec<Option<usize>>,
    /// Final `<eos>`; for a context-only encoding this equals `emo_index`.
    pub sen_index: usize,
    /// The `<bot>` token that opens the reply segment.
    pub emo_index: usize,
}

impl InputEncoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions of reply tokens (those after `emo_index`).
    pub fn reply_span(&self) -> std::ops::Range<usize> {
        self.emo_index + 1..self.len()
    }

    /// Appends one bot token, as during decoding.
    pub fn push_bot_token(&mut self, id: usize) {
        self.position_ids.push(self.token_ids.len());
        self.token_ids.push(id);
        self.state_ids.push(STATE_BOT);
        self.lm_labels.push(None);
    }
}

struct Segments {
    persona: Vec<usize>,
    turns: Vec<(Speaker, Vec<usize>)>,
}

impl Segments {
    fn encode(persona: &[String], history: &[Turn], vocab: &Vocab) -> Self {
        Self {
            persona: persona.iter().flat_map(|s| vocab.encode(s)).collect(),
            turns: history
                .iter()
                .map(|t| (t.speaker, vocab.encode(&t.text)))
                .collect(),
        }
    }

    /// Length up to and including the reply-opening `<bot>`.
    fn context_len(&self) -> usize {
        2 + self.persona.len() + self.turns.iter().map(|(_, t)| t.len() + 1).sum::<usize>() + 1
    }

    /// Drops the oldest turns (keeping the latest), then trims persona tokens
    /// from the end, until `context_len() + tail <= max`.
    fn truncate(&mut self, tail: usize, max: usize) -> Result<()> {
        while self.context_len() + tail > max && self.turns.len() > 1 {
            self.turns.remove(0);
        }
        let over = (self.context_len() + tail).saturating_sub(max);
        let cut = over.min(self.persona.len());
        self.persona.truncate(self.persona.len() - cut);
        let len = self.context_len() + tail;
        if len > max {
            return Err(Error::InputTooLong { len, max });
        }
        Ok(())
    }

    fn emit(&self) -> InputEncoding {
        let mut tokens = vec![BOS, PERSONA];
        let mut states = vec![STATE_PERSONA, STATE_PERSONA];
        tokens.extend(&self.persona);
        states.extend(std::iter::repeat_n(STATE_PERSONA, self.persona.len()));
        for (speaker, ids) in &self.turns {
            let (tag, state) = match speaker {
                Speaker::User => (SPK_USER, STATE_USER),
                Speaker::Bot => (SPK_BOT, STATE_BOT),
            };
            tokens.push(tag);
            tokens.extend(ids);
            states.extend(std::iter::repeat_n(state, ids.len() + 1));
        }
        tokens.push(SPK_BOT);
        states.push(STATE_BOT);
        let emo = tokens.len() - 1;
        InputEncoding {
            position_ids: (0..tokens.len()).collect(),
            lm_labels: vec![None; tokens.len()],
            token_ids: tokens,
            state_ids: states,
            sen_index: emo,
            emo_index: emo,
        }
    }
}

/// Builds the full input for `reply` as a candidate response to the context.
/// LM labels are set only when `is_gold`.
pub fn build_input(
    persona: &[String],
    history: &[Turn],
    reply: &str,
    is_gold: bool,
    vocab: &Vocab,
    n_positions: usize,
) -> Result<InputEncoding> {
    let reply_ids = vocab.encode(reply);
    if reply_ids.is_empty() {
        return Err(Error::EmptyReply);
    }
    let mut seg = Segments::encode(persona, history, vocab);
    seg.truncate(reply_ids.len() + 1, n_positions)?;
    let mut enc = seg.emit();
    for &id in reply_ids.iter().chain(std::iter::once(&EOS)) {
        enc.push_bot_token(id);
        if is_gold {
            *enc.lm_labels.last_mut().expect("just pushed") = Some(id);
        }
    }
    enc.sen_index = enc.len() - 1;
    Ok(enc)
}

/// Builds the context ending at the reply-opening `<bot>`, leaving room for
/// `reserve` further tokens.
pub fn build_context(
    persona: &[String],
    history: &[Turn],
    vocab: &Vocab,
    n_positions: usize,
    reserve: usize,
) -> Result<InputEncoding> {
    let mut seg = Segments::encode(persona, history, vocab);
    seg.truncate(reserve, n_positions)?;
    Ok(seg.emit())
}
