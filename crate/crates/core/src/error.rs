use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error("metric is singular (smallest eigenvalue {eigenvalue:e})")]
    SingularMetric { eigenvalue: f64 },

    #[error("metric is not positive semi-definite (value {value:e})")]
    NotPsd { value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("parameter {t} outside the curve domain [0, 1]")]
    OutsideDomain { t: f64 },

    #[error("curve endpoints coincide")]
    DegenerateEndpoints,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model file parse error: {0}")]
    Parse(String),

    #[error("model validation failed for {layer}: {reason}")]
    Validation { layer: String, reason: String },

    #[error("IDX format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("inconsistent dataset: {0}")]
    Consistency(String),

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("dataset too small: need {needed} items, have {available}")]
    DatasetTooSmall { needed: usize, available: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("{failed} of {total} Monte-Carlo samples failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
