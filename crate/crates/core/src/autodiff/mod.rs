//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse. Parameters live outside the tape in a [`ParamStore`] and
//! are re-bound as leaves for every forward pass.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{central_differences, finite_difference_check, max_relative_discrepancy};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{softmax_row, Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
