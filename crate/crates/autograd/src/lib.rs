//! Minimal dense-tensor reverse-mode autodiff in `f64`.
//!
//! ```
//! use autograd::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
//! let loss = x.mul(x).unwrap().sum();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use graph::{GradSink, Gradients, Graph, NodeId, Var};
pub use ops::{bilinear_upsample, concat, cosine_matrix, stack};
pub use optim::Adam;
pub use params::{AdamState, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
