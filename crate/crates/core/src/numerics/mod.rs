//! Dense tensors, a reverse-mode tape, AdamW and gradient verification.

mod adamw;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use gradcheck::{grad_check, grad_check_params, probe_loss, GradCheckOptions};
pub use graph::{Fault, Graph, Var};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;
