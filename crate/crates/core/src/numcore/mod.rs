//! Minimal reverse-mode differentiable tensor engine.

mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_multi, relative_error};
pub use graph::{DiffNode, Fault, Graph, Var, EPS};
pub use params::{ParamId, ParamStore, ParamVars};
pub use rng::RngStream;
pub use tensor::Tensor;
