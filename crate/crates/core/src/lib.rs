//! Operator-splitting approximations for linear, possibly degenerate,
//! parabolic equations on the periodic torus, together with dyadic
//! Richardson-type acceleration and a convergence-order harness.

pub mod error;
pub mod expr;
pub mod extrapolate;
pub mod grid;
pub mod harness;
mod krylov;
pub mod problem;
pub mod schemes;
pub mod substep;

pub use error::{Error, Result};
