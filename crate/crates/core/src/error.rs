use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarmonyError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarmonyError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {component} at step {step}")]
    NonFinite { component: String, step: u64 },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarmonyError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Stamps the training step onto errors raised below the trainer.
    pub fn at_step(self, step: u64) -> Self {
        match self {
            Self::NonFinite { component, .. } => Self::NonFinite { component, step },
            e => e,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Shape(_) => "shape",
            Self::Config(_) => "config",
            Self::InvalidArgument(_) => "invalid_argument",
            Self::NonFinite { .. } => "non_finite",
            Self::Tokenizer(_) => "tokenizer",
            Self::Data(_) => "data",
            Self::Checkpoint(_) => "checkpoint",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
        }
    }
}
