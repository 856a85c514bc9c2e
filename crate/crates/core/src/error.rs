use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke an operation's precondition (mismatched dimensions etc).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A point projected to non-positive depth.
    #[error("degenerate geometry: point {index} has depth {depth:e}")]
    Degenerate { index: usize, depth: f64 },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("{path}: no such file")]
    MissingFile { path: PathBuf },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Payload parsed but its array sizes disagree with its declared dimensions.
    #[error("inconsistent payload: {0}")]
    Inconsistent(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// Validation-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Contract(_) | Error::Validation(_))
    }
}
