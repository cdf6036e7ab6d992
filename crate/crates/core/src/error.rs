//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; the message names the violated bound.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file content.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("input of {len} tokens exceeds max_len {max_len}")]
    InputTooLong { len: usize, max_len: usize },

    /// A zero-norm or otherwise unusable embedding vector.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("vocabulary mismatch: corpus has {corpus} entries, checkpoint expects {checkpoint}")]
    VocabMismatch { corpus: usize, checkpoint: usize },

    /// Checkpoint file cannot be decoded; the message names the offending field.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    /// A loss or gradient left the representable range.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    /// A classification split that cannot support probe training.
    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("insufficient examples for label {label}: have {have}, need {need}")]
    InsufficientClass {
        label: usize,
        have: usize,
        need: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
