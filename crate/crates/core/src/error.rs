use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MatError>;

#[derive(Debug, Error)]
pub enum MatError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("row {row} has no unmasked position")]
    Masking { row: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("label {label} at index {index} is outside [0, {max}]")]
    Label {
        index: usize,
        label: usize,
        max: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("loss became non-finite at step {step}")]
    Divergence { step: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MatError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        MatError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
