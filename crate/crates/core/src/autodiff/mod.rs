//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
pub mod gradcheck;
mod loss;
mod optim;
mod params;
mod tensor;

pub use graph::{log_softmax_rows, softmax_rows, Gradients, Graph, NodeId};
pub use loss::masked_cross_entropy;
pub(crate) use loss::cross_entropy_weights;
pub use optim::{AdamWConfig, OptimizerState};
pub use params::ParameterStore;
pub use tensor::Tensor;
