//! Dense tensors, reverse-mode autodiff, Adam and the learning-rate schedule.

pub mod kernels;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use kernels::{bmm, cross_entropy_label_smoothed, layer_norm, matmul, mean_axis, permute, softmax};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{BoundParams, ParamStore};
pub use schedule::{inverse_sqrt_lr, LrSchedule};
pub use tape::{cosine, Gradients, Graph, Var};
pub use tensor::{DType, Real, Tensor};
