//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The operation set is exactly what the dehazing networks, their losses and
//! the embedding classifier need: convolutions, nearest upsampling, channel
//! concatenation, separable valid-region filtering, a handful of pointwise
//! maps and row-wise softmax utilities.

mod element;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
