//! Reverse-mode differentiation over dense `f64` tensors.

pub mod gradcheck;
mod tape;
mod tensor;
pub mod text;

pub use tape::{Activation, EwiseKind, Gradients, ReduceKind, Tape, Var, LOG_CLAMP};
pub use tensor::DenseTensor;
