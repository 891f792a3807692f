//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod checkpoint;
mod grad_check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use grad_check::grad_check;
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{gelu_scalar, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
