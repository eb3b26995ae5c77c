use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DamaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("mask ratio {ratio} is unsupported by adaptive masking (needs >= 0.5)")]
    UnsupportedRatio { ratio: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite {what} at step {step}")]
    Numeric { step: u64, what: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl DamaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DamaError::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            DamaError::Config(_) | DamaError::UnsupportedRatio { .. } => 2,
            DamaError::Numeric { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, DamaError>;
