use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// A shape constraint was violated; `axis` names the offending dimension.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },
    #[error("{op}: invalid configuration: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub fn dim(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn config(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
