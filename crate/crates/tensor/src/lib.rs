//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Values are stored in [`Tensor`], an immutable, cheaply clonable buffer with
//! a shape. Differentiable computations are recorded on a [`Graph`]; calling
//! [`Graph::backward`] replays the tape in reverse and accumulates gradients
//! only for nodes that transitively depend on a leaf marked `requires_grad`.
//!
//! All reductions run in a fixed order, so replaying the same graph on the same
//! inputs yields bit-identical values and gradients.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
pub mod serialize;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
