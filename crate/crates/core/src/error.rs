//! Crate-wide error type shared by the identification and control modules.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix input contains NaN/inf entries or has degenerate shape.
    InvalidMatrix(String),
    /// Operand shapes are inconsistent.
    DimensionMismatch(String),
    /// The data sequence is too short for the requested horizons.
    InsufficientData(String),
    /// QP constraint set is empty.
    QpInfeasible,
    /// QP objective decreases without bound over the feasible set.
    QpUnbounded,
    /// Iterative solver hit its iteration cap before meeting tolerance.
    MaxIterations { iterations: usize, residual: f64 },
    /// A cost or constraint function produced NaN/inf.
    NonFiniteEvaluation(String),
    /// A simulated state diverged to NaN/inf.
    NonFiniteState { instant: usize },
    /// All singular values of the data Hankel fell below the order threshold.
    DegenerateHankel,
    /// Steady-state system is rank deficient with an inconsistent right-hand side.
    SingularSteadyState { residual: f64 },
    /// Root search for the steady-state equations stalled above tolerance.
    NoSteadyStateFound { residual: f64 },
    /// Invalid option or configuration value.
    InvalidConfig(String),
    /// A solver error raised during closed-loop simulation, tagged with the instant.
    AtInstant { instant: usize, source: Box<Error> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidMatrix(msg) => write!(f, "invalid matrix: {msg}"),
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            Error::QpInfeasible => write!(f, "QP is infeasible"),
            Error::QpUnbounded => write!(f, "QP is unbounded below"),
            Error::MaxIterations {
                iterations,
                residual,
            } => write!(
                f,
                "solver reached {iterations} iterations with residual {residual:.3e}"
            ),
            Error::NonFiniteEvaluation(msg) => write!(f, "non-finite evaluation: {msg}"),
            Error::NonFiniteState { instant } => {
                write!(f, "state diverged to non-finite values at instant {instant}")
            }
            Error::DegenerateHankel => {
                write!(f, "all singular values below threshold; data Hankel is degenerate")
            }
            Error::SingularSteadyState { residual } => write!(
                f,
                "steady-state system is singular and inconsistent (residual {residual:.3e})"
            ),
            Error::NoSteadyStateFound { residual } => write!(
                f,
                "no steady state found (residual floor {residual:.3e})"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::AtInstant { instant, source } => {
                write!(f, "at instant {instant}: {source}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::AtInstant { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
