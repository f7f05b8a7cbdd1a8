//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model evaluation, fitting, and sampling routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Parameter outside its declared open interval.
    #[error("parameter {index} = {value} is outside ({lower}, {upper})")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown system '{0}'")]
    UnknownSystem(String),

    #[error("unknown method '{0}'")]
    UnknownMethod(String),

    /// The vector field returned a non-finite value during integration.
    #[error("non-finite field value at t = {time} (Runge-Kutta stage {stage})")]
    NumericalBlowup { time: f64, stage: usize },

    /// Spline design matrix is rank deficient for the data at hand.
    #[error("ill-conditioned spline design: {k} basis functions for {n} observations")]
    Conditioning { k: usize, n: usize },

    /// Gauss-Newton ran out of iterations; carries the last iterate.
    #[error("Gauss-Newton did not converge after {iterations} iterations (|grad| = {grad_norm:.3e})")]
    Convergence {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("degenerate smoother: effective dof {df:.3} >= {n} observations")]
    DegenerateSmoother { df: f64, n: usize },

    /// Every optimizer start failed; `diagnostics` holds one line per start.
    #[error("estimation failed: {message}")]
    EstimationFailure {
        message: String,
        diagnostics: Vec<String>,
    },

    #[error("particle degeneracy at time index {time_index} (ESS = {ess:.2})")]
    Degeneracy { time_index: usize, ess: f64 },

    #[error("insufficient posterior draws: {got} < {required}")]
    InsufficientDraws { got: usize, required: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
