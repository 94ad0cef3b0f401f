use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument is outside the accepted input domain (NaN coordinate, empty group, ...).
    #[error("input error: {0}")]
    Input(String),
    /// A caller broke an API contract (non-scalar loss, second backward, channel mismatch).
    #[error("contract error: {0}")]
    Contract(String),
    /// A numeric argument is outside the mathematical domain of a loss.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed file content.
    #[error("parse error: {0}")]
    Parse(String),
    /// Synthetic scene placement failed.
    #[error("generation error: {0}")]
    Generation(String),
    /// A training step produced a non-finite loss.
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
