//! Small fp64 tensor kernel.
//!
//! Dense 4-D tensors and CNN primitives with hand-written backward passes,
//! executed over the IR by [`Model`]. On top sit the gated residual adapter
//! (RED block) with its losses, checked by central differences.
//!
//! Computation is in f64 throughout so that finite-difference checks can
//! resolve relative errors well below 1e-5.

mod checkpoint;
mod diffusion;
mod exec;
mod gradcheck;
mod loss;
pub mod ops;
mod red;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use diffusion::{ddpm_noise, diffusion_loss, DiffusionSchedule};
pub use exec::{BnMode, ForwardPass, Model, ParamGrads, ParamStore};
pub use gradcheck::{grad_check, relative_error, GradCheckOp, GradCheckReport, GroupError, Probe, DEFAULT_DELTA};
pub use loss::{cross_entropy, kd_loss, red_loss, softmax, KlDirection, LossOutput, RedDistance};
pub use red::{insert_red_blocks, red_backward, red_forward, RedAblation, RedBlockParams, RedCache, RedGrads, RedInsertion, RED_TAG};
pub use exec::ZERO_BIAS_TAG;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("diffusion step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
