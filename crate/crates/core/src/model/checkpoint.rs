//! Binary checkpoint format.
//!
//! ```text
//! b"CAIRECKP" | u32 LE version | u32 LE header length | JSON header
//! | f32 LE tensor data, row-major, in header order | SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelState};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAIRECKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// A trained model plus what is needed to use it safely.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState<f32>,
    pub vocab_fingerprint: String,
    /// Emotion label strings indexed by class id.
    pub emotion_labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_fingerprint: String,
    emotion_labels: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let header = Header {
        config: model.config().clone(),
        vocab_fingerprint: ckpt.vocab_fingerprint.clone(),
        emotion_labels: ckpt.emotion_labels.clone(),
        tensors: model
            .names()
            .iter()
            .zip(model.params())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.param_count() * 4 + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 + DIGEST_LEN {
        return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[16..data_start])
        .map_err(|e| corrupt(format!("header: {e}")))?;

    let mut data = &body[data_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < n * 4 {
            return Err(corrupt(format!("tensor `{}` truncated", entry.name)));
        }
        let (chunk, rest) = data.split_at(n * 4);
        data = rest;
        let values = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape, values).map_err(|e| corrupt(e.to_string()))?;
        named.push((entry.name, tensor));
    }
    if !data.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", data.len())));
    }
    if header.emotion_labels.len() != header.config.n_emotions {
        return Err(corrupt("emotion label count differs from config".into()));
    }
    let model = ModelState::from_parts(header.config, named).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        model,
        vocab_fingerprint: header.vocab_fingerprint,
        emotion_labels: header.emotion_labels,
    })
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint. When `expected_fingerprint` is given, a checkpoint
/// trained against a different vocabulary is rejected.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected_fingerprint: Option<&str>,
) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ckpt = decode_checkpoint(&fs::read(path)?, path)?;
    if let Some(expected) = expected_fingerprint {
        if expected != ckpt.vocab_fingerprint {
            return Err(Error::VocabMismatch {
                expected: expected.to_string(),
                found: ckpt.vocab_fingerprint,
            });
        }
    }
    Ok(ckpt)
}
