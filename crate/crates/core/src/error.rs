use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DteError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset record {record}: {reason}")]
    Record { record: String, reason: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("parameter partition: {0}")]
    Partition(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Grad(#[from] dte_autograd::GradError),
}

impl DteError {
    /// Short machine-readable category, used for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            DteError::Invalid(_) | DteError::Shape(_) => "invalid",
            DteError::NonFinite(_) => "numeric",
            DteError::Config(_) => "config",
            DteError::Record { .. } => "data",
            DteError::Checkpoint { .. } => "checkpoint",
            DteError::Partition(_) => "partition",
            DteError::Io { .. } => "io",
            DteError::Image { .. } => "image",
            DteError::Grad(_) => "autograd",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DteError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DteError> = std::result::Result<T, E>;
