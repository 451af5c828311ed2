//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod gemm;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{bce_value, BinaryOp, Gradients, Graph, UnaryOp, Var, PROB_EPS};
pub use optim::{AdamW, ParamGroup};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the models.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
