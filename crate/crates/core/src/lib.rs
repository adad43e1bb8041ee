//! Synthetic truss modal datasets and an uncertainty-aware residual
//! variational graph autoencoder that predicts natural frequencies, damping
//! ratios and full-field mode shapes from per-node response spectra.

pub mod error;
pub mod rng;
pub mod truss;
pub mod psd;
pub mod dataset;
pub mod nn;
pub mod model;
pub mod uq;
pub mod losses;

pub use error::{Error, Result};
pub mod trainer;
pub mod evaluation;
