use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation pipeline and its experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value is outside its admissible range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    /// A covariance lost positive (semi)definiteness beyond tolerance.
    #[error("{what} is not positive definite at step {step} (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite {
        what: &'static str,
        step: usize,
        min_eigenvalue: f64,
    },

    /// A measurement trace could not be parsed.
    #[error("{path}: {message}")]
    Trace { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Step index for numeric failures, if the error carries one.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::NonFinite { step, .. } | Error::NotPositiveDefinite { step, .. } => Some(*step),
            _ => None,
        }
    }

    /// True for failures raised while the numerics were running, as opposed to
    /// bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        self.step().is_some()
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
