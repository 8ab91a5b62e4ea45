use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("target id {id} out of range for {classes} classes")]
    TargetOutOfRange { id: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("loss is not deterministic under a fixed seed ({first} vs {second})")]
    NondeterministicLoss { first: f64, second: f64 },
    #[error("no labeled positions to score")]
    NoLabeledPositions,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid vocabulary file: {0}")]
    InvalidVocab(String),

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("{path}: file is empty")]
    EmptyFile { path: String },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unknown emotion label `{0}`")]
    UnknownLabel(String),
    #[error("distractor sampling needs at least two distinct conversations in the pool")]
    SingleConversation,

    #[error("reply is empty after normalization")]
    EmptyReply,
    #[error("dialogue history is empty")]
    EmptyHistory,
    #[error("input of length {len} exceeds n_positions = {max} after truncation")]
    InputTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error(
        "checkpoint was saved with vocabulary {found}, but the loaded vocabulary is {expected}"
    )]
    VocabMismatch { expected: String, found: String },

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("feedback record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for problems with input files or user-supplied data rather than
    /// failures of the computation itself.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::EmptyCorpus
                | Error::InvalidVocab(_)
                | Error::MissingColumn { .. }
                | Error::EmptyFile { .. }
                | Error::Malformed { .. }
                | Error::UnknownLabel(_)
                | Error::SingleConversation
                | Error::EmptyReply
                | Error::EmptyHistory
                | Error::InputTooLong { .. }
                | Error::CorruptCheckpoint { .. }
                | Error::VocabMismatch { .. }
                | Error::InvalidRecord { .. }
                | Error::EmptyEvalSet
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}
