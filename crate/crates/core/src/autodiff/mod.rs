//! Dense tensors with exact reverse-mode gradients.

mod error;
mod gradcheck;
mod graph;
mod params;
mod tensor;

#[cfg(test)]
mod tests;

pub use error::TensorError;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, RELATIVE_FLOOR};
pub use graph::{evaluate_with_gradients, sigmoid, Gradients, Graph, OpKind, Var};
pub use params::{ContainerIndex, IndexEntry, ParameterStore};
pub use tensor::Tensor;
