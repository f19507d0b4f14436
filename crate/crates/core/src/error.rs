use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{}:{line}: parse error: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Integrity {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown track `{0}`")]
    UnknownTrack(String),

    #[error("non-finite embedding for track `{0}`")]
    NonFinite(String),

    #[error("target of pair {index} ({target:?}) has {len} tokens, max target length is {max}")]
    TargetOverflow {
        index: usize,
        target: String,
        len: usize,
        max: usize,
    },

    #[error("registry fingerprint mismatch: checkpoint was trained against {checkpoint}, active registry is {registry}")]
    FingerprintMismatch { checkpoint: String, registry: String },

    #[error("decoding failed: {0}")]
    Decode(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
