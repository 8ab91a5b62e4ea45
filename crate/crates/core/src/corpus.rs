//! Dataset ingestion and example construction.
//!
//! Two formats are read:
//!
//! * the empathetic-dialogues CSV distribution (`conv_id, utterance_idx, context,
//!   prompt, utterance` are consumed, other columns ignored). Commas inside text
//!   are escaped as `_comma_` in that distribution, so rows split on raw commas.
//! * a line-oriented persona-chat file. Every line starts with a turn number;
//!   number `1` opens a new dialogue. `your persona: ...` lines add persona
//!   sentences, any other line is `user text<TAB>bot reply` (extra tab-separated
//!   fields are ignored).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_PERSONA: [&str; 3] = [
    "my name is caire",
    "i want to help humans to make a better world",
    "i am a good friend of humans",
];

pub const DEFAULT_HISTORY_WINDOW: usize = 3;

const REQUIRED_COLUMNS: [&str; 5] = ["conv_id", "utterance_idx", "context", "prompt", "utterance"];
const PERSONA_PREFIX: &str = "your persona:";

pub fn default_persona() -> Vec<String> {
    DEFAULT_PERSONA.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// 0 for the person describing the situation, 1 for the listener.
    pub speaker: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub conv_id: String,
    pub emotion_label: String,
    pub situation: String,
    pub utterances: Vec<Utterance>,
}

/// Emotion class names; the index is the class id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLabelTable {
    labels: Vec<String>,
}

impl EmotionLabelTable {
    /// Distinct labels, sorted lexicographically.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        Self {
            labels: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn bot(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Bot,
            text: text.into(),
        }
    }
}

/// One training item: context, the reply to predict and the conversation's
/// emotion class (`None` when the source carries no label).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub conv_id: String,
    pub persona: Vec<String>,
    pub history: Vec<Turn>,
    pub gold_reply: String,
    pub emotion: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EmpatheticData {
    pub records: Vec<DialogueRecord>,
    pub labels: EmotionLabelTable,
}

fn unescape(field: &str) -> String {
    field.replace("_comma_", ",")
}

pub fn load_empathetic_csv(path: impl AsRef<Path>) -> Result<EmpatheticData> {
    let path = path.as_ref();
    let body = fs::read_to_string(path)?;
    parse_empathetic_csv(&body, &path.display().to_string())
}

/// Parses the CSV body; `origin` only labels error messages.
pub fn parse_empathetic_csv(body: &str, origin: &str) -> Result<EmpatheticData> {
    let mut lines = body
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::EmptyFile {
        path: origin.into(),
    })?;
    let columns: Vec<&str> = header
        .trim_end_matches('\r')
        .split(',')
        .map(str::trim)
        .collect();
    let mut col = [0usize; REQUIRED_COLUMNS.len()];
    for (slot, name) in col.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::MissingColumn {
                path: origin.into(),
                column: name.into(),
            })?;
    }
    let [c_conv, c_idx, c_ctx, c_prompt, c_utt] = col;
    let needed = col.iter().max().copied().unwrap_or(0) + 1;

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, (DialogueRecord, Vec<(usize, Utterance)>)> = HashMap::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() < needed {
            return Err(Error::Malformed {
                path: origin.into(),
                line: lineno + 1,
                message: format!("expected at least {needed} fields, found {}", fields.len()),
            });
        }
        let idx: usize = fields[c_idx].trim().parse().map_err(|_| Error::Malformed {
            path: origin.into(),
            line: lineno + 1,
            message: format!(
                "utterance_idx `{}` is not a positive integer",
                fields[c_idx]
            ),
        })?;
        if idx == 0 {
            return Err(Error::Malformed {
                path: origin.into(),
                line: lineno + 1,
                message: "utterance_idx starts at 1".into(),
            });
        }
        let conv_id = fields[c_conv].trim().to_string();
        let entry = grouped.entry(conv_id.clone()).or_insert_with(|| {
            order.push(conv_id.clone());
            (
                DialogueRecord {
                    conv_id,
                    emotion_label: fields[c_ctx].trim().to_string(),
                    situation: unescape(fields[c_prompt]),
                    utterances: Vec::new(),
                },
                Vec::new(),
            )
        });
        entry.1.push((
            idx,
            Utterance {
                speaker: (idx - 1) % 2,
                text: unescape(fields[c_utt]),
            },
        ));
    }
    if order.is_empty() {
        return Err(Error::EmptyFile {
            path: origin.into(),
        });
    }

    let records: Vec<DialogueRecord> = order
        .into_iter()
        .map(|id| {
            let (mut rec, mut utts) = grouped.remove(&id).expect("grouped by id");
            utts.sort_by_key(|(i, _)| *i);
            rec.utterances = utts.into_iter().map(|(_, u)| u).collect();
            rec
        })
        .collect();
    let labels = EmotionLabelTable::from_labels(records.iter().map(|r| r.emotion_label.clone()));
    Ok(EmpatheticData { records, labels })
}

/// One example per utterance position `t ≥ 2` (1-based): the previous
/// `history_window` utterances are the history and utterance `t` is the reply.
/// Roles are relative to the replier, so history always ends on a user turn.
pub fn make_examples(
    records: &[DialogueRecord],
    labels: &EmotionLabelTable,
    persona: &[String],
    history_window: usize,
) -> Result<Vec<DialogueExample>> {
    let window = history_window.max(1);
    let mut out = Vec::new();
    for rec in records {
        let emotion = labels
            .id(&rec.emotion_label)
            .ok_or_else(|| Error::UnknownLabel(rec.emotion_label.clone()))?;
        for t in 1..rec.utterances.len() {
            let reply = &rec.utterances[t];
            let history = rec.utterances[t.saturating_sub(window)..t]
                .iter()
                .map(|u| Turn {
                    speaker: if u.speaker == reply.speaker {
                        Speaker::Bot
                    } else {
                        Speaker::User
                    },
                    text: u.text.clone(),
                })
                .collect();
            out.push(DialogueExample {
                conv_id: rec.conv_id.clone(),
                persona: persona.to_vec(),
                history,
                gold_reply: reply.text.clone(),
                emotion: Some(emotion),
            });
        }
    }
    Ok(out)
}

/// Picks a gold reply from another conversation to serve as the negative
/// candidate. Never returns a reply from `current`'s conversation, nor one
/// textually equal to `current.gold_reply`.
pub fn sample_distractor<'a, R: Rng + ?Sized>(
    pool: &'a [DialogueExample],
    current: &DialogueExample,
    rng: &mut R,
) -> Result<&'a str> {
    let eligible =
        |e: &DialogueExample| e.conv_id != current.conv_id && e.gold_reply != current.gold_reply;
    if pool.is_empty() {
        return Err(Error::SingleConversation);
    }
    for _ in 0..32 {
        let cand = &pool[rng.random_range(0..pool.len())];
        if eligible(cand) {
            return Ok(&cand.gold_reply);
        }
    }
    // Dense same-conversation pools: fall back to an exact uniform draw.
    let all: Vec<&DialogueExample> = pool.iter().filter(|e| eligible(e)).collect();
    if all.is_empty() {
        return Err(Error::SingleConversation);
    }
    Ok(&all[rng.random_range(0..all.len())].gold_reply)
}

/// Seeded 80/10/10 split by conversation. With three or more conversations
/// the validation and test parts each get at least one.
pub fn split_by_conversation(
    records: &[DialogueRecord],
    seed: u64,
) -> (
    Vec<DialogueRecord>,
    Vec<DialogueRecord>,
    Vec<DialogueRecord>,
) {
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let held_out = if n >= 3 { (n / 10).max(1) } else { 0 };
    let (n_valid, n_test) = (held_out, held_out);
    let test = shuffled.split_off(n - n_test);
    let valid = shuffled.split_off(n - n_test - n_valid);
    (shuffled, valid, test)
}

pub fn load_persona_pretraining(
    path: impl AsRef<Path>,
    history_window: usize,
) -> Result<Vec<DialogueExample>> {
    let path = path.as_ref();
    parse_persona_pretraining(
        &fs::read_to_string(path)?,
        &path.display().to_string(),
        history_window,
    )
}

/// Parses the persona-chat line format. Each turn pair becomes one example
/// with that dialogue's persona; emotion is absent.
pub fn parse_persona_pretraining(
    body: &str,
    origin: &str,
    history_window: usize,
) -> Result<Vec<DialogueExample>> {
    struct Dialogue {
        persona: Vec<String>,
        turns: Vec<Turn>,
    }
    let window = history_window.max(1);
    let mut out = Vec::new();
    let mut current: Option<Dialogue> = None;
    let mut dialogue_no = 0usize;

    for (lineno, raw) in body.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: origin.into(),
            line: lineno + 1,
            message,
        };
        let (num, rest) = line
            .split_once(' ')
            .ok_or_else(|| malformed("expected `<number> <text>`".into()))?;
        let num: usize = num
            .parse()
            .map_err(|_| malformed(format!("line must start with a turn number, found `{num}`")))?;
        if num == 1 || current.is_none() {
            dialogue_no += 1;
            current = Some(Dialogue {
                persona: Vec::new(),
                turns: Vec::new(),
            });
        }
        let dialogue = current.as_mut().expect("dialogue opened above");

        if let Some(sentence) = rest.trim_start().strip_prefix(PERSONA_PREFIX) {
            if !dialogue.turns.is_empty() {
                return Err(malformed("persona line after dialogue turns".into()));
            }
            dialogue.persona.push(sentence.trim().to_string());
            continue;
        }
        let mut fields = rest.split('\t');
        let user = fields.next().unwrap_or("").trim();
        let bot = fields
            .next()
            .ok_or_else(|| malformed("turn line needs `user<TAB>reply`".into()))?
            .trim();
        if user.is_empty() || bot.is_empty() {
            return Err(malformed("empty turn text".into()));
        }
        dialogue.turns.push(Turn::user(user));
        let start = dialogue.turns.len().saturating_sub(window);
        out.push(DialogueExample {
            conv_id: format!("persona:{dialogue_no}"),
            persona: dialogue.persona.clone(),
            history: dialogue.turns[start..].to_vec(),
            gold_reply: bot.to_string(),
            emotion: None,
        });
        dialogue.turns.push(Turn::bot(bot));
    }
    Ok(out)
}
