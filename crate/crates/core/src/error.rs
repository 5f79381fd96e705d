use thiserror::Error;

use crate::mdp::ValidationReport;

/// Errors raised by the analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(ValidationReport),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("action sets differ: {left:?} vs {right:?}")]
    ActionMismatch { left: Vec<String>, right: Vec<String> },

    #[error("infeasible marginals: left mass {left}, right mass {right}")]
    InfeasibleMarginals { left: f64, right: f64 },

    #[error("infeasible potentials at ({i}, {j}): f_left - f_right exceeds cost by {excess:e}")]
    InfeasiblePotentials { i: usize, j: usize, excess: f64 },

    #[error("linear solve failed in {context} (spectral radius estimate {spectral_radius:?})")]
    NumericalSolve {
        context: String,
        spectral_radius: Option<f64>,
    },

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("policy enumeration needs {count} candidates, above the cap of {cap}; use a smaller instance")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("quotient rejected: {0}")]
    QuotientRejected(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
