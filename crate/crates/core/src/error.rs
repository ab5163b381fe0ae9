use std::path::PathBuf;

/// Errors surfaced by the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed configuration or shapes that do not conform.
    #[error("configuration error: {0}")]
    Config(String),
    /// A primitive produced NaN or infinity.
    #[error("numeric error in {op}: non-finite value")]
    NonFinite { op: String },
    /// The API was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Transport or process failure talking to an external engine; never a score.
    #[error("infrastructure error: {0}")]
    Infrastructure(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }
}
