use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar or structural parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// User-supplied input (image, dataset, config) is unusable.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed weight file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// An API was called outside its contract (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}
pub(crate) use dim_err;
pub(crate) use param_err;
