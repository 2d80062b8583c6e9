use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("instanton noise path has zero norm; projection is undefined")]
    SingularInstanton,

    #[error("integration diverged at time node {node} ({stage})")]
    Divergence { node: usize, stage: &'static str },

    #[error("checkpoint plan error: {0}")]
    Plan(String),

    #[error("no convergence after {iterations} iterations: {message}")]
    NonConvergence { iterations: usize, message: String },

    /// A structural assumption of the asymptotic estimate is violated,
    /// e.g. an eigenvalue of the projected second variation is >= 1.
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("Riccati solution blew up near time node {node} (norm {norm:.3e})")]
    RiccatiSingularity { node: usize, norm: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors that signal a violated modelling assumption rather
    /// than a numerical failure.
    pub fn is_assumption_violation(&self) -> bool {
        matches!(self, Error::AssumptionViolation(_))
    }
}
