//! Desk-scale zero-shot voice cloning stack.
//!
//! Pipeline: text and a reference waveform go through a speech tokenizer
//! (mel → discrete codes at 25/s), a speaker-conditioned autoregressive
//! transformer (text → codes), a latent flow-matching model (codes' hidden
//! states → continuous latents at 50/s), and a flow-regularized waveform
//! VAE whose decoder is the vocoder (latents → 16 kHz audio). Extensions
//! cover per-emotion LoRA adapters, text-to-voice timbre generation over a
//! PCA-compressed condition space, and professional voice cloning by
//! optimizing a single speaker embedding against the frozen model.
//!
//! Everything trains on CPU in `f64`; every stochastic path takes a seed.

pub mod ar;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod ext;
pub mod flowvae;
pub mod fm;
pub mod nn;
pub mod pipeline;
pub mod speaker;
pub mod stage;
pub mod tokenizer;
pub mod toyset;

pub use error::{Error, Result};
