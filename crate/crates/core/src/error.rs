use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MuviError>;

#[derive(Debug, Error)]
pub enum MuviError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at site `{site}`")]
    NonFinite { site: String },

    #[error("optimization diverged at step {step}: smoothed ELBO {elbo}")]
    Diverged { step: usize, elbo: f64 },
}

impl MuviError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MuviError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        MuviError::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, MuviError::NonFinite { .. } | MuviError::Diverged { .. })
    }
}
