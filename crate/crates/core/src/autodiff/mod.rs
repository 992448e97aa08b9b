//! Reverse-mode automatic differentiation on dense tensors.
//!
//! [`tensor::Tensor`] is the value type, [`tape::Tape`] records the graph,
//! and op modules attach differentiable kernels to the tape: generic
//! elementwise/linear-algebra ops in [`ops`], fused convolution in [`conv`]
//! and a fused LSTM scan in [`lstm`].

pub mod conv;
pub mod lstm;
pub mod ops;
mod ops_raw;
pub mod tape;
pub mod tensor;

pub use ops::scaled_dot_attention;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{c, Real, Tensor};
