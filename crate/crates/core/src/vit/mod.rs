//! A 3D vision transformer: cubic patch embedding, class token, learned
//! positional embedding, pre-norm encoder blocks and a sigmoid head, with
//! hand-written backward passes for every layer.

mod checkpoint;
pub mod layers;
mod model;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{gelu, gelu_grad, Attention, EncoderBlock, LayerNorm, Linear, Mlp, Mode};
pub use model::{patchify, probability, sigmoid, unpatchify, Vit3d, Vit3dConfig, Vit3dParams};
pub use tensor::{Real, Tensor};

use crate::volume::Dims;

#[derive(Debug, thiserror::Error)]
pub enum VitError {
    #[error("volume {dims} is not divisible into {patch}^3 patches")]
    IndivisibleDims { dims: Dims, patch: usize },
    #[error("{what} shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { what: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {name} has shape {found:?}, config implies {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("volume is {found}, model expects {expected}")]
    VolumeSize { expected: Dims, found: Dims },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,
}

impl VitError {
    pub fn category(&self) -> &'static str {
        match self {
            VitError::IndivisibleDims { .. } => "IndivisibleDims",
            VitError::ShapeMismatch { .. } | VitError::ParamShape { .. } | VitError::VolumeSize { .. } => "ShapeMismatch",
            VitError::InvalidConfig(_) => "InvalidConfig",
            VitError::NoRecordedForward => "NoRecordedForward",
        }
    }
}
