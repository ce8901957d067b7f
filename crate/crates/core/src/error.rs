//! Crate-wide error type.

/// Errors produced by tensor ops, model construction, the simulator and the
/// on-disk formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Input data violates an invariant (bad labels, off-mask picks, ...).
    #[error("data error: {0}")]
    Data(String),
    /// An on-disk artifact is malformed or corrupted.
    #[error("format error: {0}")]
    Format(String),
    /// A named item (word, parameter, episode) does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }
}
