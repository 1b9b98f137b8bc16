use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("feature row {row} has zero norm")]
    DegenerateFeature { row: usize },

    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("network simplex did not terminate after {pivots} pivots")]
    NotConverged { pivots: usize },

    #[error("degenerate shape: all keypoints coincide")]
    DegenerateShape,

    #[error("only {common} keypoints valid in both images, need at least {required}")]
    InsufficientKeypoints { common: usize, required: usize },

    #[error("no valid pairs ({skipped} skipped)")]
    NoValidPairs { skipped: usize },

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    /// True for failures caused by unreadable or malformed input files.
    pub fn is_input_format(&self) -> bool {
        matches!(
            self,
            Error::Read { .. } | Error::Format(_) | Error::Corruption(_)
        )
    }
}
