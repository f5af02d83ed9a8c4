//! Crate-wide error type.

/// Errors surfaced by ingestion, model fitting, and estimation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data or configuration violates a documented precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// A CSV (or config) row could not be parsed; carries the 1-based line.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A linear system or design matrix is singular / rank deficient.
    #[error("singular system: {0}")]
    Singular(String),

    /// An iterative solver exhausted its iteration budget.
    #[error("non-convergence: {0}")]
    NonConvergence(String),

    /// Diverging coefficients in a binary-response fit.
    #[error("perfect separation: {0}")]
    PerfectSeparation(String),

    /// The moment equation is only satisfied at the parameter-space boundary.
    #[error("boundary solution: {0}")]
    BoundarySolution(String),

    /// A numeric result is undefined for the given inputs.
    #[error("computation: {0}")]
    Computation(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
