//! Lipschitz-constrained band extraction, normalization and attention
//! modules, a four-branch ensemble built from them, and the tooling to
//! train, evaluate, stream and verify it.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod export;
pub mod fft;
pub mod lgca;
pub mod lgcbe;
pub mod lgcn;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod stream;
pub mod training;
pub mod verification;

pub use error::{LelError, Result};
