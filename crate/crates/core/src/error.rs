use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("measures live on different state spaces")]
    SpaceMismatch,

    #[error("invalid state space: {0}")]
    InvalidSpace(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("discretization error: {message} (try at least {suggested_cells} cells)")]
    Discretization {
        message: String,
        suggested_cells: usize,
    },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("line search failed at iteration {iteration} (gradient norm {gradient_norm:e})")]
    LineSearch {
        iteration: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },
}

impl Error {
    /// Solver-side failures, as opposed to bad inputs.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::LineSearch { .. })
    }
}
