//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Cholesky factorization hit a non-positive pivot. Signals a degenerate
    /// covariance; callers regularize via [`crate::numerics::cholesky_jittered`].
    #[error("matrix not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A responsibility row could not be normalized; indicates NaN inputs.
    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("gradient for parameter `{0}` is non-finite")]
    NonFiniteGradient(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unstable integration: {0}")]
    UnstableIntegration(String),

    #[error("empty frequency band: {0}")]
    BandEmpty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch (file corrupted or truncated)")]
    ChecksumMismatch,

    #[error("invalid format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
