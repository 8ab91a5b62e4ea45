//! Empathetic dialogue model built on a small causal transformer decoder.
//!
//! The model reads a persona, a window of dialogue history and a candidate reply
//! joined by speaker tokens, and is trained jointly on three objectives: next-token
//! prediction over the reply, gold-vs-distractor response selection, and dialogue
//! emotion classification. Everything needed to go from raw corpus files to a
//! trained checkpoint, decoded replies and evaluation numbers lives here; the HTTP
//! service and command line sit in sibling crates.

pub mod corpus;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
