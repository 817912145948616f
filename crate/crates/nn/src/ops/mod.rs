//! Differentiable operations, implemented as methods on [`crate::Var`].

mod conv;
pub(crate) mod elementwise;
mod reduce;
mod resample;
mod shape;

pub use elementwise::{sigmoid, softplus};
