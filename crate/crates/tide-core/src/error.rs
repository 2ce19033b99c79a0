//! Error type shared by all pipeline stages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TideError {
    /// Invalid configuration (bad dimensions, inconsistent counts, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset or split does not provide what an operation needs.
    #[error("data error: {0}")]
    Data(String),

    /// An input violates a mathematical precondition (negative dose,
    /// zero vector where a direction is required, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure that cannot be recovered from (zero row during
    /// normalization, singular scaling, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// API misuse, e.g. reading encoders from an unfrozen surrogate.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TideError>;

impl TideError {
    pub fn config(msg: impl Into<String>) -> Self {
        TideError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        TideError::Data(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        TideError::Domain(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        TideError::Numerical(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        TideError::Usage(msg.into())
    }
}
