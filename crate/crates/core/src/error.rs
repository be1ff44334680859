use thiserror::Error;

/// Errors raised by the diffusion kernels, models and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("singular schedule: {0}")]
    Singular(String),

    #[error("impossible conditioning event: {0}")]
    Impossible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("token id {id} out of range for vocabulary of size {k}")]
    TokenOutOfRange { id: usize, k: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
