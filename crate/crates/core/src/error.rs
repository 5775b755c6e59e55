use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed volume header {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("size mismatch: expected {expected} values, found {found}")]
    Size { expected: usize, found: usize },

    #[error("invalid value: {0}")]
    Value(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("solver did not converge: {0}")]
    Convergence(String),

    #[error("stratification impossible: {0}")]
    Stratification(String),

    #[error("bootstrap resample failed: {0}")]
    Resample(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("volume {index}: {source}")]
    Volume {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("patch {patch}: {source}")]
    Patch {
        patch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_volume(self, index: usize) -> Self {
        Error::Volume {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_patch(self, patch: usize) -> Self {
        Error::Patch {
            patch,
            source: Box::new(self),
        }
    }
}
