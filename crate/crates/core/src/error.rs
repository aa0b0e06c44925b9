use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum HailError {
    /// Invalid configuration (bad distribution parameters, malformed window, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller broke a documented precondition (unsorted input, dimension mismatch, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// An explicit budget was exceeded; never truncate silently.
    #[error("capacity error: {what} = {value} exceeds budget {budget}{detail}")]
    Capacity {
        what: &'static str,
        value: u64,
        budget: u64,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Corrupt or mismatched serialized data.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, HailError>;

impl HailError {
    pub fn config(msg: impl Into<String>) -> Self {
        HailError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        HailError::Usage(msg.into())
    }
}
