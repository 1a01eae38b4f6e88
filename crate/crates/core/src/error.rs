use std::path::PathBuf;

use weedsense_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("data: sample {id}: {detail}")]
    Data { id: String, detail: String },
    /// Several independent validation failures, reported together.
    #[error("data: {} problem(s): {}", .0.len(), .0.join("; "))]
    Invalid(Vec<String>),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format: {0}")]
    Format(String),
    #[error("numeric: non-finite {what} ({detail})")]
    NonFinite { what: String, detail: String },
}

impl Error {
    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn data(id: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data {
            id: id.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable category for machine-readable error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Dimension { .. }) => "dimension",
            Error::Tensor(TensorError::Config { .. }) | Error::Config(_) => "config",
            Error::Tensor(TensorError::Usage(_)) => "usage",
            Error::Data { .. } | Error::Invalid(_) => "data",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::NonFinite { .. } => "numeric",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
