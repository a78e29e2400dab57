//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major array. Differentiable computations are
//! recorded on a [`Graph`]: leaves are inserted with [`Graph::param`] or
//! [`Graph::constant`], every operation returns a [`Var`] handle, and
//! [`Graph::backward`] produces [`Gradients`] for every parameter leaf.
//! [`grad_check`] compares those gradients with central finite differences.
//!
//! ```
//! use gmflow_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let p = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(p, p).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, ParamError};
pub use graph::{Gradients, Graph, Var};
pub use real::{DType, Real};
pub use tensor::Tensor;
