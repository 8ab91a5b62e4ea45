//! Word-level tokenizer with a fixed inventory of separator tokens.
//!
//! Text is lowercased, punctuation is split into single-character tokens and
//! whitespace is collapsed. Ids `0..=6` are reserved, in this order:
//!
//! | id | token       | role                                   |
//! |----|-------------|----------------------------------------|
//! | 0  | `<pad>`     | padding                                |
//! | 1  | `<bos>`     | start of every input                   |
//! | 2  | `<eos>`     | end of a reply                         |
//! | 3  | `<user>`    | opens a user turn                      |
//! | 4  | `<bot>`     | opens a bot turn and the reply segment |
//! | 5  | `<persona>` | opens the persona segment              |
//! | 6  | `<unk>`     | out-of-vocabulary word                 |
//!
//! The vocabulary file holds one token per line; the line number is the id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SPK_USER: usize = 3;
pub const SPK_BOT: usize = 4;
pub const PERSONA: usize = 5;
pub const UNK: usize = 6;

/// Literal tags of the reserved ids, in id order.
pub const RESERVED: [&str; 7] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<user>",
    "<bot>",
    "<persona>",
    "<unk>",
];

/// Lowercases, splits punctuation into separate tokens and collapses whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Normalized text joined by single spaces.
pub fn normalize_text(text: &str) -> String {
    normalize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from raw texts. Tokens seen at least `min_freq`
    /// times are ranked by descending frequency, ties broken lexicographically,
    /// and the top `max_size - 7` are kept after the reserved ids.
    pub fn build<I, S>(texts: I, min_freq: usize, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!(
                "max_size {max_size} cannot hold the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any_text = false;
        for text in texts {
            for tok in normalize(text.as_ref()) {
                any_text = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any_text {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        ranked.sort_by(|(a, ca), (b, cb)| cb.cmp(ca).then_with(|| a.cmp(b)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t))
                .collect(),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::InvalidVocab(format!(
                    "line {} must be `{want}`",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!(
                    "line {}: invalid token {t:?}",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidVocab(format!(
                    "line {}: duplicate token {t:?}",
                    i + 1
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces; reserved ids render as their tags.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or(Error::TokenOutOfRange {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// The file body: one token per line, newline-terminated.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(body: &str) -> Result<Self> {
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the file body, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}
