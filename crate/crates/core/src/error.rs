use std::path::PathBuf;

use thiserror::Error;
use tlm_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("variant mismatch: checkpoint holds {found}, expected {expected}")]
    VariantMismatch { found: String, expected: String },
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numbers.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::Tensor(TensorError::NonFinite(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
