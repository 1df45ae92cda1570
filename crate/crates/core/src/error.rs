use thiserror::Error;

/// Errors raised anywhere in the model core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("validation error in record {record}, field `{field}`: {message}")]
    Validation {
        record: usize,
        field: String,
        message: String,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptySequence(_) => "empty-sequence",
            Error::Contract(_) => "contract",
            Error::Vocab(_) => "vocab",
            Error::Config(_) => "config",
            Error::Determinism(_) => "determinism",
            Error::UnknownParam(_) => "unknown-param",
            Error::Validation { .. } => "validation",
            Error::Divergence(_) => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
