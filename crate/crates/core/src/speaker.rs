//! Learnable speaker encoder: variable-length reference mel in, fixed-size
//! unit-norm condition vector out. Trained jointly with whichever stage
//! owns it (the autoregressive model, or the flow-matching model's own
//! instance).

use crate::config::SpeakerEncoderConfig;
use crate::data::mel::MelSpectrogram;
use crate::nn::{Conv1d, Linear};
use crate::{Error, Result};
use chorale_autograd::{checkpoint, rng, ParamSet, Tensor};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    Encoder,
    PvcOptimized,
    T2vGenerated,
}

/// Fixed-size vocal-identity vector, unit-norm.
#[derive(Debug, Clone)]
pub struct SpeakerCondition {
    pub vector: Array1<f64>,
    pub source: ConditionSource,
}

impl SpeakerCondition {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub struct SpeakerEncoder {
    pub cfg: SpeakerEncoderConfig,
    conv1: Conv1d,
    conv2: Conv1d,
    conv3: Conv1d,
    attn_hidden: Linear,
    attn_score: Linear,
    out: Linear,
}

impl SpeakerEncoder {
    pub fn new(cfg: SpeakerEncoderConfig, seed: u64) -> Self {
        let mut r = rng::substream(seed, "speaker-encoder");
        let h = cfg.hidden;
        SpeakerEncoder {
            conv1: Conv1d::new(cfg.n_mels, h, 5, 2, 2, &mut r),
            conv2: Conv1d::new(h, h, 5, 2, 2, &mut r),
            conv3: Conv1d::new(h, h, 3, 1, 1, &mut r),
            attn_hidden: Linear::new(h, h, &mut r),
            attn_score: Linear::new(h, 1, &mut r),
            out: Linear::new(h, cfg.embed_dim, &mut r),
            cfg,
        }
    }

    /// Differentiable forward: `[T, n_mels]` to a unit-norm `[embed_dim]`.
    /// Stays on the tape so joint training reaches the encoder.
    pub fn forward(&self, mel: &Tensor) -> Tensor {
        let x = self.conv1.forward(mel).relu();
        let x = self.conv2.forward(&x).relu();
        let x = self.conv3.forward(&x).relu();
        // Attention pooling over time.
        let scores = self.attn_score.forward(&self.attn_hidden.forward(&x).tanh_op());
        let weights = scores.transpose2().softmax_last(); // [1, T']
        let pooled = weights.matmul(&x); // [1, h]
        let d = self.cfg.embed_dim;
        self.out.forward(&pooled).reshape(&[d]).l2_normalize()
    }

    /// Inference entry point with the 0.5 s minimum-reference check.
    pub fn encode(&self, mel: &MelSpectrogram) -> Result<SpeakerCondition> {
        if mel.num_frames() < self.cfg.min_frames {
            return Err(Error::InvalidInput(format!(
                "reference of {} mel frames is below the minimum {}",
                mel.num_frames(),
                self.cfg.min_frames
            )));
        }
        let x = Tensor::constant(mel.frames.clone().into_dyn());
        let e = self.forward(&x);
        let vector = e
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        Ok(SpeakerCondition {
            vector,
            source: ConditionSource::Encoder,
        })
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.conv1.collect(&mut ps, "conv1");
        self.conv2.collect(&mut ps, "conv2");
        self.conv3.collect(&mut ps, "conv3");
        self.attn_hidden.collect(&mut ps, "attn_hidden");
        self.attn_score.collect(&mut ps, "attn_score");
        self.out.collect(&mut ps, "out");
        ps
    }
}

#[derive(Serialize, Deserialize)]
struct SpeakerFileMeta {
    dim: usize,
    source: ConditionSource,
}

/// Write `<stem>.json` + `<stem>.f32` (raw little-endian float32 vector).
pub fn export_speaker(stem: &Path, cond: &SpeakerCondition) -> Result<()> {
    let meta = SpeakerFileMeta {
        dim: cond.dim(),
        source: cond.source,
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    let mut bytes = Vec::with_capacity(cond.dim() * 4);
    for &v in cond.vector.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(stem.with_extension("f32"), bytes)?;
    Ok(())
}

pub fn import_speaker(stem: &Path) -> Result<SpeakerCondition> {
    let meta: SpeakerFileMeta =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = std::fs::read(stem.with_extension("f32"))?;
    if bytes.len() != meta.dim * 4 {
        return Err(Error::InvalidInput(format!(
            "speaker vector file holds {} bytes, expected {}",
            bytes.len(),
            meta.dim * 4
        )));
    }
    let vector: Array1<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(SpeakerCondition {
        vector,
        source: meta.source,
    })
}

pub fn save_speaker_encoder(dir: &Path, enc: &SpeakerEncoder) -> Result<()> {
    let config = serde_json::json!({ "kind": "speaker_encoder", "config": enc.cfg });
    checkpoint::save(dir, &enc.params(), &config)?;
    Ok(())
}

pub fn load_speaker_encoder(dir: &Path) -> Result<SpeakerEncoder> {
    let (arrays, config) = checkpoint::load(dir)?;
    let cfg: SpeakerEncoderConfig = serde_json::from_value(
        config
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing speaker encoder config".into()))?,
    )?;
    let enc = SpeakerEncoder::new(cfg, 0);
    checkpoint::restore_params(&enc.params(), &arrays)?;
    Ok(enc)
}
