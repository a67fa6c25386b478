//! Dense row-major tensors with a dynamic reverse-mode tape.
//!
//! Every forward operation on a [`Graph`] is evaluated eagerly and recorded;
//! [`Graph::backward`] walks the recording in reverse and accumulates
//! gradients into every node that requires them. The tape is rebuilt for
//! each step, there is no graph caching.
//!
//! ```
//! use flowsr_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

mod adam;
mod error;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use graph::{ContrastiveAnchor, Graph, SimilarityMode, Var};
pub use real::Real;
pub use tensor::Tensor;
