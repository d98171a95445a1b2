//! Dense tensors, a reverse-mode tape, parameter storage with an adaptive
//! optimiser, checkpoints, and finite-difference gradient checks.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, grad_check_selected, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{AdamConfig, ParamId, ParameterStore, DEFAULT_LEARNING_RATE};
pub use tensor::Tensor;
