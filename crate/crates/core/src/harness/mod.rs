//! Desk-scale experiments: teacher training, RED distillation, the block
//! ablation sweep and a miniature diffusion distillation.
//!
//! One training run is single-threaded apart from the batch-parallel conv
//! kernels, whose reductions are ordered, so metrics are bit-identical for
//! a given `(config, seed)` regardless of thread count. Independent runs in
//! a sweep are distributed over worker threads.

mod config;
mod dataset;
pub mod ddpm;
mod metrics;
mod suite;
mod train;

use thiserror::Error;

pub use config::DistillConfig;
pub use dataset::{make_toy_dataset, make_toy_dataset_with, GratingSpec, Split, ToyDataset};
pub use ddpm::{toy_ddpm_distill, DdpmConfig, DdpmReport, DdpmSeedResult};
pub use metrics::{write_jsonl, write_summary_csv, SUMMARY_COLUMNS};
pub use suite::{ablation_suite, mean_accuracy, paired_runs, toy_zoo_config, AblationRow, AblationTable, ToyExperiment, ToyProtocol};
pub use train::{accuracy, distill, train_teacher, EpochMetrics, RunMetrics, Sgd, StepRecord};

use crate::align::AlignError;
use crate::ir::IrError;
use crate::kernel::KernelError;
use crate::memory::MemoryError;
use crate::rewrite::RewriteError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("loss diverged at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },
    #[error("plan does not fit the graphs: {0}")]
    PlanMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}
