use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("size mismatch: expected {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at example {row}, class {col}")]
    NonFinite { row: usize, col: usize },

    #[error("score {value} outside [0, 1] at example {row}, class {col}")]
    ScoreOutOfRange { row: usize, col: usize, value: f32 },

    #[error("class index {index} out of range for {n_classes} classes")]
    ClassOutOfRange { index: usize, n_classes: usize },

    #[error("row index {index} out of range for {len} rows")]
    RowOutOfRange { index: usize, len: usize },

    #[error("duplicate example id {0:?}")]
    DuplicateId(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("exhaustive sweep over {models} models exceeds the cap of {cap}")]
    TooManyModels { models: usize, cap: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("predictor family still too correlated after {attempts} attempts (max pairwise r = {max_correlation:.4})")]
    DiversityUnattainable { attempts: usize, max_correlation: f64 },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::NonFiniteGradient
                | Error::UndefinedCorrelation(_)
                | Error::DiversityUnattainable { .. }
        )
    }
}
