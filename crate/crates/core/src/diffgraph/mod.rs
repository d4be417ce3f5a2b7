//! Minimal reverse-mode differentiation over dense `f64` tensors, plus the
//! Adam optimizer. Sized for the small networks in [`crate::policy`].

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Nonlinearity, ParamId, ParamSet, Var};
pub use optim::{clip_global_norm, Adam};
pub use tensor::Tensor;
