use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum VtiError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("power iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    Convergence { iterations: usize, last_change: f64 },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid perturbation spec: {0}")]
    Spec(String),

    #[error("hook error: {0}")]
    Hook(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VtiError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        VtiError::Dimension(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        VtiError::Format(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        VtiError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = VtiError> = std::result::Result<T, E>;
