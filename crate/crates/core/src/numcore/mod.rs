//! Dense tensors, reverse-mode autodiff, and the optimizer machinery both
//! forecasters train with.

mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{
    adam_step, early_stop, plateau_schedule, OptimizerState, PlateauConfig, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Negative slope of every LeakyReLU in the crate.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;
