//! Dense `f64` tensors with a tape-based reverse-mode autodiff [`Graph`].
//!
//! The primitive set is exactly what a small transformer needs: affine maps,
//! batched matmul, masked softmax, layer norm, ReLU/tanh, inverted dropout,
//! concatenation, permutation, row selection and scalar reductions.

mod error;
mod gemm;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var, MASK_FILL};
pub use tensor::{broadcast_shape, numel, Tensor};
