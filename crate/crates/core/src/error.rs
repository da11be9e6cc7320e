use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{value} lies inside the support of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("failed to converge: {what} (best residual {best_residual:e})")]
    Convergence { what: String, best_residual: f64 },

    #[error("invalid bracket [{a}, {b}]: f(a) = {fa}, f(b) = {fb}")]
    InvalidBracket { a: f64, b: f64, fa: f64, fb: f64 },

    #[error("root finding failed on ({lo}, {hi}) for branch {branch}: {reason}")]
    RootFinding {
        branch: usize,
        lo: f64,
        hi: f64,
        reason: String,
    },

    #[error("empty support")]
    EmptySupport,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("eigensolver failed: {0}")]
    Eigen(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of an iterative numerical method, as opposed to bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. } | Error::RootFinding { .. } | Error::Eigen(_)
        )
    }
}
