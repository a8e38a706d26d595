//! Minimal reverse-mode automatic differentiation.

pub mod attention;
mod graph;
pub mod optim;
pub mod params;

pub use attention::AttentionLayout;
pub use graph::{CumsumLayout, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
