//! Tensor foundation: arrays, deterministic RNG, kernels, autodiff tape,
//! parameter storage and the binary container.

pub mod container;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod rng;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Adam, ParamGrads, ParamId, ParamStore, Session};
pub use rng::Rng;
pub use tensor::Tensor;
