use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TgqnError>;

/// One differing field between a stored and an active configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDiff {
    pub field: String,
    pub stored: String,
    pub active: String,
}

impl fmt::Display for FieldDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: stored {} != active {}",
            self.field, self.stored, self.active
        )
    }
}

#[derive(Debug, Error)]
pub enum TgqnError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("could not place object {object} without intersecting a wall, another object or the camera ring after {retries} retries")]
    Placement { object: usize, retries: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: integrity check failed: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("checkpoint configuration mismatch: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    ConfigMismatch(Vec<FieldDiff>),

    #[error("non-finite loss at step {step}; batch dumped to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error("operation requires a {expected} checkpoint, found {found}")]
    UnsupportedVariant { expected: String, found: String },
}

impl TgqnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TgqnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        TgqnError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TgqnError::Config(msg.into())
    }
}
