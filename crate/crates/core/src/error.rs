use thiserror::Error;
use ugp_nn::NnError;

#[derive(Debug, Error)]
pub enum UgpError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error(transparent)]
    Tensor(#[from] NnError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = UgpError> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::UgpError::InvalidArgument(format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::UgpError::Shape(format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;
