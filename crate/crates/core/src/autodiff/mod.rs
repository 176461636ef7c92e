//! Eager reverse-mode differentiation over dense `f64` tensors.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, GruWeights, Sampled, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
