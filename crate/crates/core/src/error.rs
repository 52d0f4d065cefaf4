use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LvrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LvrError {
    /// A configuration value violates its invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Malformed or inconsistent data (labels out of range, empty batches, ...).
    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: row {row}, column '{column}': {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LvrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LvrError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LvrError::Config(_)
                | LvrError::Dimension { .. }
                | LvrError::Data(_)
                | LvrError::Csv { .. }
                | LvrError::Json(_)
        )
    }
}
