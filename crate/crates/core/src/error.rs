//! Error types shared across the crate.

use thiserror::Error;

/// Top-level error for all library operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {token} out of vocabulary (vocab size {vocab})")]
    OutOfVocab { token: u32, vocab: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("embedding failed: {0}")]
    EmbedFailure(String),

    #[error("loss diverged: {0}")]
    LossDiverged(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("key store does not authenticate: {0}")]
    AuthFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
