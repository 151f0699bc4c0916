use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("negative time lag of {lag_seconds}s: target starts before the last input interaction")]
    DataOrdering { lag_seconds: i64 },
    #[error("{0}")]
    Contract(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Lookup(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Divergence(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-parsable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Shape { .. }) => "dimension",
            Error::Tensor(TensorError::Index { .. }) => "index",
            Error::Tensor(TensorError::InvalidMask { .. }) => "invalid-mask",
            Error::Tensor(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::DataOrdering { .. } => "data-ordering",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Lookup(_) => "lookup",
            Error::Format(_) => "format",
            Error::Divergence(_) => "divergence",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
