//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between tensors, layers, or parameter vectors.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A configuration value outside its legal range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Not enough data for the requested operation (e.g. N <= k).
    #[error("too few points: {0}")]
    TooFewPoints(String),

    /// Malformed input file; the message names the offending line/offset.
    #[error("data format error in {path}: {detail}")]
    DataFormat { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
