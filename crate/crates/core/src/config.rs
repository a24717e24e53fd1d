//! Configuration records for every stage.
//!
//! All structs reject unknown keys so a typo in a config file fails loudly
//! instead of silently training with defaults. `Default` gives the
//! full-size desk configuration; the `small()` constructors are the sizes
//! used by the overfit fixtures and tests.

use serde::{Deserialize, Serialize};

fn default_sample_rate() -> u32 {
    16_000
}

/// Audio/feature conventions shared by every module. 16 kHz with hop 160
/// gives 100 mel frames/s, so the tokenizer's ×4 downsample lands on 25
/// tokens/s and the waveform codec's ×320 on 50 latent frames/s.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: default_sample_rate(),
            n_fft: 1024,
            hop: 160,
            win: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub n_mels: usize,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub commit_beta: f64,
    pub ctc_weight: f64,
    /// Codes unused for this many consecutive steps are re-seeded from a
    /// random batch feature.
    pub dead_code_steps: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codebook_size: 1024,
            code_dim: 256,
            hidden: 256,
            n_mels: 80,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            commit_beta: 0.25,
            ctc_weight: 0.1,
            dead_code_steps: 200,
        }
    }
}

impl TokenizerConfig {
    pub fn small() -> Self {
        TokenizerConfig {
            codebook_size: 160,
            code_dim: 64,
            hidden: 128,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerEncoderConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Minimum reference length in mel frames (0.5 s at 100 frames/s).
    pub min_frames: usize,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        SpeakerEncoderConfig {
            n_mels: 80,
            hidden: 128,
            embed_dim: 256,
            min_frames: 50,
        }
    }
}

impl SpeakerEncoderConfig {
    pub fn small() -> Self {
        SpeakerEncoderConfig {
            hidden: 48,
            embed_dim: 64,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_context: usize,
    pub audio_vocab: usize,
    pub spk_dim: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            layers: 6,
            d_model: 512,
            heads: 8,
            ff_mult: 4,
            max_context: 2048,
            audio_vocab: 1024,
            spk_dim: 256,
        }
    }
}

impl ArConfig {
    pub fn small() -> Self {
        ArConfig {
            layers: 2,
            d_model: 96,
            heads: 4,
            ff_mult: 2,
            max_context: 512,
            audio_vocab: 160,
            spk_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowVaeConfig {
    pub latent_dim: usize,
    /// Channel widths after each of the four downsampling stages
    /// (strides 4, 4, 4, 5 — total 320).
    pub channels: [usize; 4],
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub kl_weight: f64,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    pub scale_log_min: f64,
    pub scale_log_max: f64,
}

impl Default for FlowVaeConfig {
    fn default() -> Self {
        FlowVaeConfig {
            latent_dim: 64,
            channels: [32, 48, 64, 96],
            flow_blocks: 4,
            flow_hidden: 96,
            kl_weight: 0.1,
            log_sigma_min: -7.0,
            log_sigma_max: 5.0,
            scale_log_min: -5.0,
            scale_log_max: 5.0,
        }
    }
}

impl FlowVaeConfig {
    pub fn small() -> Self {
        FlowVaeConfig {
            latent_dim: 16,
            channels: [24, 48, 64, 96],
            flow_hidden: 48,
            ..Default::default()
        }
    }

    /// Identity-flow variant: a plain VAE with the KL taken directly
    /// against the standard normal.
    pub fn without_flow(mut self) -> Self {
        self.flow_blocks = 0;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub t_embed_dim: usize,
    pub cond_dim: usize,
    pub spk_dim: usize,
    pub sigma_min: f64,
    pub p_prompt: f64,
    pub default_steps: usize,
}

impl Default for FmConfig {
    fn default() -> Self {
        FmConfig {
            latent_dim: 64,
            width: 512,
            layers: 6,
            heads: 8,
            ff_mult: 4,
            t_embed_dim: 64,
            cond_dim: 512,
            spk_dim: 256,
            sigma_min: 1e-4,
            p_prompt: 0.5,
            default_steps: 10,
        }
    }
}

impl FmConfig {
    pub fn small() -> Self {
        FmConfig {
            latent_dim: 16,
            width: 96,
            layers: 2,
            heads: 4,
            ff_mult: 2,
            t_embed_dim: 32,
            cond_dim: 96,
            spk_dim: 64,
            ..Default::default()
        }
    }
}

/// Sampling controls for autoregressive generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.9,
            top_k: 0,
            top_p: 0.95,
            max_tokens: 600,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        SamplingConfig {
            temperature: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// When set, the learning rate decays linearly from `lr` to this value
    /// over the run.
    pub lr_final: Option<f64>,
    /// Linear learning-rate warmup from 0 over this many steps.
    pub warmup_steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub save_every: u64,
    /// Flow-VAE only: length of the random waveform crop per example.
    pub crop_samples: usize,
    /// AR only: fraction of training examples laid out one-shot.
    pub p_one_shot: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            lr_final: None,
            warmup_steps: 0,
            seed: 0,
            log_every: 10,
            save_every: 500,
            crop_samples: 5600,
            p_one_shot: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: String,
    pub split_ratios: Option<(f64, f64, f64)>,
    pub split_seed: u64,
}

/// Top-level run configuration; one JSON file drives every subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub mel: MelConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TrainConfig,
    pub speaker: SpeakerEncoderConfig,
    pub ar: ArConfig,
    pub ar_train: TrainConfig,
    pub flowvae: FlowVaeConfig,
    pub flowvae_train: TrainConfig,
    pub fm: FmConfig,
    pub fm_train: TrainConfig,
    pub sampling: SamplingConfig,
    pub out_dir: String,
    pub seed: u64,
}

impl RunConfig {
    /// Desk-size preset used by the overfit fixtures: every model shrunk to
    /// widths that train in minutes on a CPU.
    pub fn small() -> Self {
        RunConfig {
            tokenizer: TokenizerConfig::small(),
            speaker: SpeakerEncoderConfig::small(),
            ar: ArConfig::small(),
            flowvae: FlowVaeConfig::small(),
            fm: FmConfig::small(),
            ..Default::default()
        }
    }

    pub fn from_json(s: &str) -> crate::Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::Error::Config(e.to_string()))
    }

    /// Apply a `dotted.path=value` override. Values parse as JSON first and
    /// fall back to bare strings.
    pub fn apply_override(&mut self, spec: &str) -> crate::Result<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| crate::Error::Config(format!("override `{spec}` is not key=value")))?;
        let mut root = serde_json::to_value(&*self)?;
        let parts: Vec<&str> = path.split('.').collect();
        {
            let mut cur = &mut root;
            for part in &parts[..parts.len() - 1] {
                cur = cur
                    .as_object_mut()
                    .and_then(|o| o.get_mut(*part))
                    .ok_or_else(|| {
                        crate::Error::Config(format!(
                            "override path `{path}`: unknown key `{part}`"
                        ))
                    })?;
            }
            let last = parts[parts.len() - 1];
            let obj = cur.as_object_mut().ok_or_else(|| {
                crate::Error::Config(format!("override path `{path}`: `{last}` is not an object"))
            })?;
            if !obj.contains_key(last) {
                return Err(crate::Error::Config(format!(
                    "override path `{path}`: unknown key `{last}`"
                )));
            }
            let val = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(last.to_string(), val);
        }
        *self = serde_json::from_value(root).map_err(|e| crate::Error::Config(e.to_string()))?;
        Ok(())
    }
}
