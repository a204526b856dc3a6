//! Minimal deterministic 1D-CNN + MLP binary classifier.
//!
//! Pipeline: `[conv -> ReLU (-> max-pool)]* -> global average pool ->
//! [linear -> ReLU]* -> linear -> sigmoid`. Gradients are written out by hand;
//! the engine is generic over `f32` (training) and `f64` (gradient checks).

mod arch;
mod checkpoint;
mod engine;
mod gradcheck;
mod optim;
mod params;

use std::fmt::Debug;
use std::iter::Sum;

use thiserror::Error;

pub use arch::{ArchName, ArchitectureSpec, ConvSpec, LinearSpec};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use engine::{
    bce_with_logits, forward, loss_and_grads, pooled_features, predict_logits, sigmoid,
    value_and_grad, ForwardCache,
};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use optim::{adam_step, sgd_step, AdamState, OptimizerKind, OptimizerState};
pub use params::{init_params, LayerParams, ParameterSet};

use crate::binio::FormatError;

/// Floating-point type the engine runs in.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch at {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("label at index {index} is {value}, expected 0 or 1")]
    Label { index: usize, value: u8 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("checkpoint format: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
