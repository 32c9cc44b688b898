//! Minimal reverse-mode autodiff over dense f64 tensors.
//!
//! Deliberately small and single-threaded: deterministic to the bit given
//! identical inputs, which the training loop relies on.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{BilinearSample, Graph, NodeId, Op};
pub use optim::{ParamId, ParamStore, Sgd};
pub use tensor::Tensor;
