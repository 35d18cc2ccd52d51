use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SailError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input for {strategy} normalization: {reason}")]
    DegenerateInput { strategy: &'static str, reason: String },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("numerical failure at step {step}: {context}")]
    NumericalFailure { step: usize, context: String },

    #[error("pretraining diverged at epoch {epoch}: loss = {loss}")]
    PretrainingFailure { epoch: usize, loss: f64 },

    #[error("prototype fit failed: class {class} has no samples")]
    Fit { class: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl SailError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SailError::InvalidInput(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        SailError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for SailError {
    fn from(e: std::io::Error) -> Self {
        SailError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SailError>;
