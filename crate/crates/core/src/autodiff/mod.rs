//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every primitive as it executes. Values are computed
//! eagerly; [`Graph::backward`] then walks the record once in reverse and
//! returns gradients for every leaf built from a tensor that requires grad.
//!
//! ```
//! use tricon_core::autodiff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(&Tensor::scalar(3.0).unwrap().with_grad());
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var, EPS_NORM, GELU_A, GELU_C, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
