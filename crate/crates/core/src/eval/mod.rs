//! Metrics and evaluation runners: WER, speaker-embedding cosine
//! similarity, vocoder resynthesis reports, and cloning-eval orchestration
//! with pluggable transcriber/embedder adapters.

pub mod adapters;
pub mod report;
pub mod wer;

pub use adapters::{EmbedderAdapter, FixedTranscriber, SpeakerEncoderEmbedder, TranscriberAdapter};
pub use report::{cloning_eval_run, resynthesis_report, CloneEvalItem, EvalReport, ResynthReport};
pub use wer::{cosine_sim, normalize_text, wer, wer_units};
