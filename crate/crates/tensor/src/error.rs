use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("double backward is not supported through {op}")]
    NoDoubleBackward { op: &'static str },
    #[error("gradient check harness: {0}")]
    Harness(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        detail: detail.into(),
    })
}
