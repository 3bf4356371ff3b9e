use std::io;

use thiserror::Error;

/// Errors raised across the library. Each variant names the failure class;
/// the message carries the module-level detail.
#[derive(Debug, Error)]
pub enum SparcError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("state error: {0}")]
    State(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SparcError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::SparcError::Shape(format!($($arg)*)) };
}
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::SparcError::Domain(format!($($arg)*)) };
}

pub(crate) use domain_err;
pub(crate) use shape_err;
