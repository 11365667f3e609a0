//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination (bad hyperparameter,
    /// missing pyramid level, unsupported pool scale, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape mismatch or unsupported input geometry.
    #[error("shape error: {0}")]
    Shape(String),

    /// Out-of-range timestep or sample index.
    #[error("index error: {0}")]
    Index(String),

    /// Malformed cache or checkpoint file. `offset` is the byte position of
    /// the first inconsistency when known.
    #[error("format error at byte {offset:?}: {msg}")]
    Format { offset: Option<u64>, msg: String },

    /// Non-finite value encountered during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn format_at(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset: Some(offset), msg: msg.into() }
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format { offset: None, msg: msg.into() }
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
