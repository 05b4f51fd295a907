//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, grad_check_extrapolated, BlockReport, GradCheckReport, Stencil,
};
pub use graph::{AttnMask, AttnShape, Gradients, Graph, RopeTable, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub(crate) use params::hex as params_hex;
pub use tensor::Tensor;

/// Default epsilon for every normalization.
pub const NORM_EPS: f32 = 1e-5;
