//! Downstream applications on top of the frozen base model: per-emotion
//! LoRA adapters, text-to-voice timbre generation, and professional voice
//! cloning.

pub mod lora;
pub mod pvc;
pub mod t2v;

pub use lora::{lora_train, LoraAdapter, LORA_TARGETS};
pub use pvc::{pvc_finetune, OptimizedEmbedding};
pub use t2v::{
    discretize_attributes, pca_fit_project, tokenize_description, PcaBasis, RawAttributes,
    TimbreAttributes, TimbreBinning, TimbreModel,
};
