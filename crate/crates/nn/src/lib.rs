//! Minimal reverse-mode automatic differentiation over `f64` matrices, with the
//! handful of layers and optimizers the depflow models need.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use graph::{Gradients, Graph, Var};
pub use layers::{cross_entropy, Conv1d, LayerNorm, Linear};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore, Session};

/// Logistic function, overflow-safe on both tails.
pub fn sigmoid(x: f64) -> f64 {
    graph::sigmoid(x)
}
