//! Dense `f64` tensors and a define-by-run reverse-mode tape.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
