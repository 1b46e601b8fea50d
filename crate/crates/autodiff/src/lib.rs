//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The engine is generic over [`Real`] (`f32` for training, `f64` for
//! gradient verification) and records a tape of eager operations in a
//! [`Graph`].

pub mod check;
pub mod conv;
mod graph;
mod real;
mod tensor;

pub use graph::{Broadcast, Gradients, Graph, Var};
pub use real::Real;
pub use tensor::{ShapeError, Tensor};
