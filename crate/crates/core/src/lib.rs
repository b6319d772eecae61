//! Peak-memory planning and residual encoded distillation.
//!
//! The crate is organized bottom-up:
//!
//! * [`ir`]: graph IR with shape inference, plus the model zoo.
//! * [`memory`]: liveness-aware theoretical peak activation memory.
//! * [`rewrite`]: aggressive-pooling student derivation.
//! * [`align`]: pooling-aligned teacher/student feature pairing.
//! * [`kernel`]: small fp64 tensor kernel with the gated residual adapter
//!   and its losses.
//! * [`harness`]: desk-scale distillation experiments.
//!
//! Data-parallel loops go through [`par`], which runs on rayon when the
//! `parallel` feature is enabled and sequentially otherwise.

pub mod align;
pub mod harness;
pub mod ir;
pub mod kernel;
pub mod memory;
pub mod par;
pub mod rewrite;
