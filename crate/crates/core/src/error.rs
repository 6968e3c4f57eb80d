use std::path::PathBuf;

use pir_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = PirError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PirError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training diverged at iteration {iteration} in {phase} phase ({detail})")]
    Diverged {
        iteration: u64,
        phase: &'static str,
        detail: String,
        snapshot: Option<PathBuf>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("config parse: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("config write: {0}")]
    ConfigWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PirError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        PirError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PirError::InvalidConfig(msg.into())
    }
}
