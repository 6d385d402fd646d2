//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
mod graph;
pub mod nn;
mod param;

pub use graph::{AttentionLayout, Graph, Var};
pub use param::{ParamId, Parameter};
