//! Dense tensors, a define-by-run autodiff tape, and Adam.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var, IGNORE_INDEX};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
