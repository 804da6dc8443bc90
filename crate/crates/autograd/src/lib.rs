//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every backward rule is expressed with differentiable ops, so gradients
//! can be differentiated again (`grad(.., create_graph = true)`). Kernels
//! that loop over a batch use rayon when the `parallel` feature is on.

mod array;
pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod par;
mod tensor;

pub use array::Array;
pub use ops::concat;
pub use tensor::{grad, grad_arrays, is_grad_enabled, no_grad, with_grad_mode, GradError, Tensor};
