use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum KeecError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("rank-deficient system: {0}")]
    Rank(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("incomplete state: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, KeecError>;

impl KeecError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            KeecError::Config(_)
            | KeecError::Format(_)
            | KeecError::Checksum { .. }
            | KeecError::Io(_)
            | KeecError::Dimension(_) => 2,
            KeecError::State(_) => 3,
            KeecError::Numeric(_) | KeecError::Rank(_) | KeecError::Divergence(_) => 4,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> KeecError {
    KeecError::Dimension(msg.into())
}
