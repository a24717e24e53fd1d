//! Reverse-mode automatic differentiation over `ndarray`, sized for CPU
//! training of small speech models.
//!
//! The engine keeps everything in `f64` so that finite-difference gradient
//! checks are meaningful. Tensors are reference-counted nodes in a dynamic
//! tape; calling [`Tensor::backward`] on a scalar walks the tape in reverse
//! topological order and accumulates gradients into every trainable leaf.
//!
//! What lives here:
//! - [`Tensor`] and the op library (`ops`, `conv`, `stft`)
//! - [`ParamSet`] for named parameter registries
//! - [`Adam`] optimizer with optional global-norm clipping
//! - checkpoint I/O (`meta.json` + one little-endian `f32` file per array)
//! - seeded RNG helpers shared by every training stage

pub mod checkpoint;
pub mod conv;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod stft;
pub mod tensor;

pub use optim::Adam;
pub use tensor::{ParamSet, Tensor};

/// Errors from checkpoint I/O and shape validation.
#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
