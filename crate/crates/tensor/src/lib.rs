//! Dense `f64` tensors, a recorded compute graph with reverse-mode
//! differentiation, named parameter storage, deterministic random streams and
//! a finite-difference gradient checker.

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, op_suite, OpCheck};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::{mix, Rng};
pub use tensor::Tensor;
