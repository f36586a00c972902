//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; calling
//! [`Graph::backward`] on a scalar output sweeps the record in reverse.
//! The op set is the one a small two-stage detector needs: convolutions,
//! normalization, region pooling, channel-statistics arithmetic and the
//! usual detection losses. Graphs are generic over [`Real`], so the same
//! model code runs in `f32` for training and `f64` for gradient checks.

mod graph;
mod kernels;
mod real;
mod tensor;

pub use graph::{ChanOp, Gradients, Graph, Var};
pub use kernels::Roi;
pub use real::Real;
pub use tensor::Tensor;
