//! Minimal differentiable array computation: dense `f64` tensors, a recording
//! graph with reverse-mode gradients, Adam, a finite-difference checker and
//! the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{log_softmax, sigmoid_scalar, softmax, Graph, ParamGrads, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
