//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LelError {
    #[error("band '{name}' is too narrow: bins [{low}, {high}) are empty for T={n_samples}, fs={sampling_rate}")]
    BandTooNarrow {
        name: String,
        low: usize,
        high: usize,
        n_samples: usize,
        sampling_rate: f64,
    },

    #[error("invalid band '{name}': {reason}")]
    InvalidBand { name: String, reason: String },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("subject '{subject}' has fewer trials than classes; classes without trials: {classes:?}")]
    DeficientClasses { subject: String, classes: Vec<usize> },

    #[error("trial leakage: trial '{trial}' appears in both {first} and {second}")]
    Leakage {
        trial: String,
        first: &'static str,
        second: &'static str,
    },

    #[error("numeric domain error in {context}: {detail}")]
    NumericDomain { context: String, detail: String },

    #[error("parameter domain error: {0}")]
    ParameterDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("power iteration did not converge after {iters} iterations (last relative change {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("container format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LelError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LelError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        LelError::NumericDomain {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
