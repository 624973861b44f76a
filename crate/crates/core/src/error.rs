use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("answer marker not found in sequence")]
    MarkerNotFound,
    #[error("sequence of length {len} exceeds context window {window}")]
    ContextOverflow { len: usize, window: usize },
    #[error("no counted positions in batch")]
    EmptyBatch,
    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("parse error in {path:?}: {msg}")]
    Parse { path: Option<PathBuf>, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
