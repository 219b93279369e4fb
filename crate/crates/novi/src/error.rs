//! Error types shared across the workspace.

use thiserror::Error;

/// Unified error type for all fallible library operations.
#[derive(Debug, Error)]
pub enum NoviError {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid argument value (bad interval, empty input, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Numerical failure (factorization breakdown, non-finite values).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Misuse of the autodiff API (non-scalar output, foreign tape, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (CSV cell, checkpoint manifest, config).
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint or file format version not understood.
    #[error("version error: {0}")]
    Version(String),
}

pub type Result<T> = std::result::Result<T, NoviError>;

impl NoviError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        NoviError::Dim(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        NoviError::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        NoviError::Numerical(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        NoviError::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        NoviError::Format(msg.into())
    }
}
