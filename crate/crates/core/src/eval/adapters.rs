//! Pluggable transcriber/embedder slots. External ASR or speaker
//! verification backends implement these traits; the defaults are this
//! stack's own speaker encoder and a fixed-text mock for closed-loop
//! tests.

use crate::config::MelConfig;
use crate::data::{compute_mel, AudioClip};
use crate::speaker::SpeakerEncoder;
use crate::Result;

pub trait TranscriberAdapter {
    fn transcribe(&self, clip: &AudioClip) -> Result<String>;
}

pub trait EmbedderAdapter {
    fn embed(&self, clip: &AudioClip) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Optional perceptual-quality backend (PESQ/STOI style); no built-in
/// implementation ships, the report columns stay absent without one.
pub trait QualityAdapter {
    fn scores(&self, reference: &AudioClip, degraded: &AudioClip) -> Result<(f64, f64)>;
}

/// Mock transcriber returning a fixed string regardless of input.
pub struct FixedTranscriber(pub String);

impl TranscriberAdapter for FixedTranscriber {
    fn transcribe(&self, _clip: &AudioClip) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Default similarity backend: this stack's own speaker encoder.
pub struct SpeakerEncoderEmbedder {
    pub encoder: SpeakerEncoder,
    pub mel_cfg: MelConfig,
}

impl EmbedderAdapter for SpeakerEncoderEmbedder {
    fn embed(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        let mel = compute_mel(clip, &self.mel_cfg)?;
        let cond = self.encoder.encode(&mel)?;
        Ok(cond.vector.to_vec())
    }

    fn dim(&self) -> usize {
        self.encoder.cfg.embed_dim
    }
}
