//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by estimating-equation evaluation, fitting, and
/// certificate construction.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of inputs disagree (parameter length, weight length, block sizes).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A per-datum evaluation returned NaN or infinity. Carries the datum
    /// index so the offending observation can be inspected.
    #[error("non-finite evaluation of {what} at datum {index}")]
    NonFiniteEvaluation { what: &'static str, index: usize },

    /// The weighted Hessian is (numerically) singular where the method
    /// requires invertibility.
    #[error("singular Hessian: smallest singular value {sigma_min:.3e} below guard {guard:.3e}{context}")]
    SingularHessian {
        sigma_min: f64,
        guard: f64,
        context: String,
    },

    /// A refit failed to converge where convergence was required.
    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    /// An argument was outside its documented range.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// File or serialization failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
