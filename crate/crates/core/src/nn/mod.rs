//! Minimal differentiable kernel for the transformer models: dense tensors,
//! layer primitives with explicit backward passes, a parameter store and
//! AdamW. There is no tape; each model wires forward caches to backward
//! calls over its fixed topology.

mod adamw;
pub mod attention;
mod checkpoint;
pub mod ops;
mod params;
pub mod patch;
mod tensor;
pub mod vit;

pub use adamw::{adamw_step, clip_grad_norm, AdamWConfig, LrSchedule};
pub use attention::{mhsa, mhsa_backward, MhsaCache, MhsaGrads, MhsaWeights};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry};
pub use ops::DropoutMode;
pub use params::{reduce_grads, GradBuffer, Param, ParamId, ParamStore};
pub use patch::PatchGeometry;
pub use tensor::Tensor;
pub use vit::{Head, Vit, VitCache, VitConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite activation after layer '{0}'")]
    NonFinite(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}
