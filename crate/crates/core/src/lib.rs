//! Incremental clustering and online anomaly detection on transmissibility
//! features: a Dirichlet-process Gaussian mixture living in the latent space
//! of a fully-connected Gaussian VAE, trained jointly, with additive summary
//! statistics carrying information across data batches.
//!
//! Module map:
//! - [`numerics`]: dense linear algebra and special functions
//! - [`dpmm`]: the DP mixture with greedy split-merge CAVI
//! - [`vae`]: encoder/decoder, analytic backprop, Adam
//! - [`engine`]: joint training loop, streaming updates, anomaly rule,
//!   checkpoints
//! - [`simulator`]: shear-building response generator and transmissibility
//!   features
//! - [`metrics`]: clustering/detection scores and 2-D projection

pub mod dpmm;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod simulator;
pub mod vae;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
