use std::io;

use thiserror::Error;

use crate::plan::PlanParseError;
use crate::tensor::TensorError;

/// Crate-level error. `Usage` and `Plan` are caller mistakes; the rest are
/// runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("plan error: {0}")]
    Plan(#[from] PlanParseError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// True for errors caused by bad arguments or configuration rather than
    /// by the runtime environment.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Plan(_) | Error::Tensor(TensorError::Usage(_)))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
