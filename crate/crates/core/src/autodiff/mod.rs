//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Every forward pass in the crate is expressed on a [`Tape`]; gradients with
//! respect to parameters and to inputs come from the same sweep.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
