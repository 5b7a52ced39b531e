//! Minimal reverse-mode autodiff over dense 4-D tensors.

pub mod conv;
mod graph;
pub mod index;
mod param;

pub use conv::Padding;
pub use graph::{Axis, Graph, Var};
pub use index::GatherMap;
pub use param::{adam_step, AdamConfig, ParamId, ParamStore, Parameter};

/// Leaky-ReLU slope used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.1;
