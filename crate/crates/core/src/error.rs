use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range [{lo}, {hi}]")]
    IndexOutOfRange { index: usize, lo: usize, hi: usize },

    #[error("noise level {sigma} outside [{lo}, {hi}]")]
    SigmaOutOfRange { sigma: f64, lo: f64, hi: f64 },

    #[error("tape does not match the current network parameters")]
    StaleTape,

    #[error("no closed-form consistency function for {0}")]
    NoClosedForm(&'static str),

    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFiniteLoss { step: usize, snapshot: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
