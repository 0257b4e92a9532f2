use thiserror::Error;

use crate::expr::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid problem: {0}")]
    Problem(String),

    #[error("unstable sub-solve: norm grew from {initial:.3e} to {current:.3e}")]
    Instability { initial: f64, current: f64 },

    #[error("sub-solver exceeded {0} internal steps")]
    MaxSteps(usize),

    #[error("spectral propagation requested for coefficients that vary in x or t")]
    SpectralInvalid,

    #[error("linear solve did not converge: residual {residual:.3e} after {iterations} iterations")]
    LinearSolve { residual: f64, iterations: usize },

    #[error(
        "time-dependent operator coefficients are not supported by the {0} scheme; use td_subinterval or td_frozen"
    )]
    TimeDependent(&'static str),

    #[error("composition coefficient c[{row}][{col}] = {value} is negative")]
    NegativeCoefficient { row: usize, col: usize, value: f64 },

    #[error("extrapolation order k = {k} outside {min}..={max}")]
    WeightRange { k: usize, min: usize, max: usize },

    #[error("cannot combine trajectories: {0}")]
    Combine(String),

    #[error("experiment case {case} failed: {source}")]
    Case {
        case: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
