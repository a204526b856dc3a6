//! Meta-learning under task shift for time-series classification.
//!
//! The crate is organised around the pipeline it supports:
//!
//! - [`nn`]: a small deterministic 1D-CNN + MLP binary classifier with manual
//!   gradients, SGD/Adam, finite-difference checking and checkpoints.
//! - [`taskgen`]: factorial synthetic seismic task sets, an SNR-binned
//!   out-of-distribution set, partitioning and the on-disk task archive.
//! - [`shift`]: cross-task accuracy, linear CKA similarity, Ward clustering,
//!   split assignment and task-sampling weights.
//! - [`meta`]: Reptile, first-order MAML, pooled (TDL) and per-task (D&C)
//!   trainers with early stopping.
//! - [`eval`]: K-shot fine-tuning evaluation and normal-model uncertainty
//!   summaries.

pub mod binio;
pub mod eval;
pub mod meta;
pub mod nn;
pub mod seed;
pub mod shift;
pub mod stats;
pub mod taskgen;

pub use nn::{ArchName, ArchitectureSpec, ParameterSet};
pub use taskgen::{Task, TaskSet};
