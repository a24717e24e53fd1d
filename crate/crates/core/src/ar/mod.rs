//! Speaker-conditioned autoregressive audio-token model: sequence layouts
//! for the zero-shot and one-shot cloning modes, the transformer itself,
//! and seeded generation.

pub mod layout;
pub mod model;

pub use layout::{
    build_generation_prefix, build_target_layout, build_training_sequence, ArVocab, CloneMode,
    SegmentTag, SequenceLayout, Utterance, TEXT_VOCAB,
};
pub use model::{
    load_ar_stage, save_ar_stage, ArModel, ConditionStream, GenerateOutput,
};
