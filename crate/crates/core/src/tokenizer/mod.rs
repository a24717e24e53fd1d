//! Encoder-VQ-Decoder speech tokenizer over mel-spectrograms.
//!
//! The encoder downsamples mel frames by 4 (so 100 frames/s becomes 25
//! tokens/s), the decoder upsamples back, and a CTC head over the
//! pre-quantization features supplies character-level supervision alongside
//! the L1 reconstruction and VQ commitment losses.

pub mod ctc;
pub mod vq;

use crate::config::{MelConfig, TokenizerConfig};
use crate::data::mel::MelSpectrogram;
use crate::data::AudioClip;
use crate::nn::{Conv1d, ConvTranspose1d, Linear};
use crate::{Error, Result};
use chorale_autograd::{checkpoint, rng, Adam, ParamSet, Tensor};
use ctc::{ctc_loss, CharVocab};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use vq::{reseed_dead_codes, vq_quantize, Codebook};

/// Discrete audio codes at 25/s.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    /// Tokens per second of source audio.
    pub rate: f64,
}

pub const TOKEN_RATE: f64 = 25.0;
/// Mel frames per audio token (the encoder's total stride).
pub const FRAMES_PER_TOKEN: usize = 4;
/// Fixed input normalization for log-mel values.
const MEL_SHIFT: f64 = 6.0;
const MEL_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy)]
pub struct TokenizerLossReport {
    pub recon: f64,
    pub commit: f64,
    pub ctc: f64,
    pub total: f64,
    pub codebook_usage: f64,
}

pub struct MelBatchItem {
    pub mel: Array2<f64>,
    pub text_units: Vec<usize>,
}

pub struct SpeechTokenizer {
    pub cfg: TokenizerConfig,
    enc_in: Conv1d,
    enc_d1: Conv1d,
    enc_d2: Conv1d,
    enc_out: Conv1d,
    dec_in: Conv1d,
    dec_u1: ConvTranspose1d,
    dec_u2: ConvTranspose1d,
    dec_out: Conv1d,
    ctc_head: Linear,
    pub codebook: Codebook,
    pub vocab: CharVocab,
    codebook_warm: bool,
}

impl SpeechTokenizer {
    pub fn new(cfg: TokenizerConfig, vocab: CharVocab, seed: u64) -> Self {
        let mut r = rng::substream(seed, "tokenizer");
        let h = cfg.hidden;
        SpeechTokenizer {
            enc_in: Conv1d::new(cfg.n_mels, h, 5, 1, 2, &mut r),
            enc_d1: Conv1d::new(h, h, 4, 2, 1, &mut r),
            enc_d2: Conv1d::new(h, h, 4, 2, 1, &mut r),
            enc_out: Conv1d::new(h, cfg.code_dim, 3, 1, 1, &mut r),
            dec_in: Conv1d::new(cfg.code_dim, h, 3, 1, 1, &mut r),
            dec_u1: ConvTranspose1d::new(h, h, 4, 2, 1, &mut r),
            dec_u2: ConvTranspose1d::new(h, h, 4, 2, 1, &mut r),
            dec_out: Conv1d::new(h, cfg.n_mels, 5, 1, 2, &mut r),
            ctc_head: Linear::new(cfg.code_dim, vocab.num_classes(), &mut r),
            codebook: Codebook::new(cfg.codebook_size, cfg.code_dim, &mut r),
            vocab,
            cfg,
            codebook_warm: false,
        }
    }

    /// Pre-quantization features `[floor(T/4), code_dim]`.
    pub fn encode_features(&self, mel: &Tensor) -> Tensor {
        // Log-mel values live around [-11.5, 2]; a fixed affine centers
        // them before the conv stack.
        let x = mel.add_scalar(MEL_SHIFT).scale(1.0 / MEL_SCALE);
        let x = self.enc_in.forward(&x).relu();
        let x = self.enc_d1.forward(&x).relu();
        let x = self.enc_d2.forward(&x).relu();
        self.enc_out.forward(&x)
    }

    fn decode_features(&self, q: &Tensor) -> Tensor {
        let x = self.dec_in.forward(q).relu();
        let x = self.dec_u1.forward(&x).relu();
        let x = self.dec_u2.forward(&x).relu();
        self.dec_out.forward(&x)
    }

    /// Discretize a mel-spectrogram. Errors if the input is shorter than
    /// one token (4 mel frames).
    pub fn tokenize(&mut self, mel: &MelSpectrogram) -> Result<TokenSequence> {
        let t_mel = mel.num_frames();
        if t_mel < FRAMES_PER_TOKEN {
            return Err(Error::InvalidInput(format!(
                "{t_mel} mel frames is below one token ({FRAMES_PER_TOKEN} frames)"
            )));
        }
        let x = Tensor::constant(mel.frames.clone().into_dyn());
        let feats = self.encode_features(&x);
        let out = vq_quantize(&feats, &mut self.codebook, None, self.cfg.ema_eps, 0)?;
        debug_assert_eq!(out.tokens.len(), t_mel / FRAMES_PER_TOKEN);
        Ok(TokenSequence {
            tokens: out.tokens,
            rate: TOKEN_RATE,
        })
    }

    /// Convenience path from a waveform.
    pub fn tokenize_clip(&mut self, clip: &AudioClip, mel_cfg: &MelConfig) -> Result<TokenSequence> {
        let mel = crate::data::compute_mel(clip, mel_cfg)?;
        self.tokenize(&mel)
    }

    /// Reconstruct a mel-spectrogram (4 frames per token).
    pub fn detokenize_to_mel(&self, tokens: &TokenSequence) -> Result<MelSpectrogram> {
        if tokens.tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        let k = self.codebook.size();
        if let Some(&bad) = tokens.tokens.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside codebook of size {k}"
            )));
        }
        let codes = self.codebook.codes.data();
        let mut q = Array2::<f64>::zeros((tokens.tokens.len(), self.codebook.dim()));
        for (i, &t) in tokens.tokens.iter().enumerate() {
            for j in 0..self.codebook.dim() {
                q[[i, j]] = codes[[t, j]];
            }
        }
        drop(codes);
        let mel = self.decode_features(&Tensor::constant(q.into_dyn()));
        let frames = mel
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        Ok(MelSpectrogram {
            frames,
            frame_rate: TOKEN_RATE * FRAMES_PER_TOKEN as f64,
        })
    }

    /// One optimizer step over a batch: L1 reconstruction + commitment +
    /// CTC, with EMA codebook updates and dead-code reseeding.
    pub fn train_step(
        &mut self,
        batch: &[MelBatchItem],
        opt: &mut Adam,
        step: u64,
        r: &mut ChaCha8Rng,
    ) -> Result<TokenizerLossReport> {
        assert!(!batch.is_empty(), "empty batch");
        let b = batch.len() as f64;
        let mut recon_terms = Vec::new();
        let mut commit_terms = Vec::new();
        let mut ctc_terms = Vec::new();
        let mut used: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
        let mut all_feats: Vec<Array2<f64>> = Vec::new();

        // Warm start: seed all codes from first-batch features, so the
        // codebook begins inside the feature distribution instead of
        // collapsing onto one nearest code.
        if !self.codebook_warm {
            self.warm_start_codebook(batch, r);
            self.codebook_warm = true;
        }
        for item in batch {
            let t_mel = item.mel.nrows();
            let t_tok = t_mel / FRAMES_PER_TOKEN;
            if t_tok == 0 {
                return Err(Error::InvalidInput("batch item below one token".into()));
            }
            let mel = Tensor::constant(item.mel.clone().into_dyn());
            let feats = self.encode_features(&mel);
            all_feats.push(
                feats
                    .data()
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned(),
            );
            let out = vq_quantize(
                &feats,
                &mut self.codebook,
                Some(self.cfg.ema_decay),
                self.cfg.ema_eps,
                step,
            )?;
            used.extend(out.tokens.iter().copied());
            let mel_hat = self.decode_features(&out.quantized);
            let target = mel.narrow(0, 0, t_tok * FRAMES_PER_TOKEN);
            recon_terms.push(mel_hat.l1(&target));
            commit_terms.push(out.commit_loss);
            if self.cfg.ctc_weight != 0.0 {
                let logits = self.ctc_head.forward(&feats);
                ctc_terms.push(ctc_loss(&logits, &item.text_units)?);
            }
        }

        let recon = sum_tensors(&recon_terms).scale(1.0 / b);
        let commit = sum_tensors(&commit_terms).scale(1.0 / b);
        let ctc = if ctc_terms.is_empty() {
            Tensor::scalar(0.0)
        } else {
            sum_tensors(&ctc_terms).scale(1.0 / b)
        };
        let total = recon
            .add(&commit.scale(self.cfg.commit_beta))
            .add(&ctc.scale(self.cfg.ctc_weight));

        let report = TokenizerLossReport {
            recon: recon.value(),
            commit: commit.value(),
            ctc: ctc.value(),
            total: total.value(),
            codebook_usage: used.len() as f64 / self.codebook.size() as f64,
        };
        if !report.total.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: format!(
                    "recon={} commit={} ctc={}",
                    report.recon, report.commit, report.ctc
                ),
            });
        }
        total.backward();
        opt.step(&self.trainable_params());

        if self.cfg.dead_code_steps > 0 {
            let views: Vec<_> = all_feats.iter().map(|f| f.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
            reseed_dead_codes(&mut self.codebook, &stacked, step, self.cfg.dead_code_steps, r);
        }
        Ok(report)
    }

    /// Skip the first-batch warm start (restored checkpoints already carry
    /// a populated codebook).
    pub fn mark_codebook_warm(&mut self) {
        self.codebook_warm = true;
    }

    fn warm_start_codebook(&mut self, batch: &[MelBatchItem], r: &mut ChaCha8Rng) {
        use rand::Rng;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for item in batch {
            let mel = Tensor::constant(item.mel.clone().into_dyn());
            let feats = self.encode_features(&mel);
            let d = feats.data();
            let f2 = d.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for row in f2.rows() {
                rows.push(row.to_vec());
            }
        }
        if rows.is_empty() {
            return;
        }
        let k = self.codebook.size();
        let dim = self.codebook.dim();
        let mut codes = self.codebook.codes.data_mut();
        let mut sums = self.codebook.ema_sums.data_mut();
        let mut counts = self.codebook.ema_counts.data_mut();
        for c in 0..k {
            let src = &rows[r.gen_range(0..rows.len())];
            for j in 0..dim {
                let jitter = 0.01 * (r.gen_range(-1.0..1.0f64));
                codes[[c, j]] = src[j] + jitter;
                sums[[c, j]] = codes[[c, j]];
            }
            counts[[c]] = 1.0;
        }
    }

    /// Everything that belongs in a checkpoint (codebook state included).
    pub fn params(&self) -> ParamSet {
        let mut ps = self.trainable_params();
        ps.push("codebook.codes", self.codebook.codes.clone());
        ps.push("codebook.ema_counts", self.codebook.ema_counts.clone());
        ps.push("codebook.ema_sums", self.codebook.ema_sums.clone());
        ps
    }

    /// Gradient-trained subset (the codebook moves by EMA, not by Adam).
    pub fn trainable_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.enc_in.collect(&mut ps, "enc.in");
        self.enc_d1.collect(&mut ps, "enc.d1");
        self.enc_d2.collect(&mut ps, "enc.d2");
        self.enc_out.collect(&mut ps, "enc.out");
        self.dec_in.collect(&mut ps, "dec.in");
        self.dec_u1.collect(&mut ps, "dec.u1");
        self.dec_u2.collect(&mut ps, "dec.u2");
        self.dec_out.collect(&mut ps, "dec.out");
        self.ctc_head.collect(&mut ps, "ctc_head");
        ps
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = serde_json::json!({
            "kind": "tokenizer",
            "config": self.cfg,
            "vocab": self.vocab.serialize(),
        });
        checkpoint::save(dir, &self.params(), &config)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (arrays, config) = checkpoint::load(dir)?;
        let cfg: TokenizerConfig = serde_json::from_value(
            config
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing tokenizer config".into()))?,
        )?;
        let vocab = CharVocab::deserialize(
            config
                .get("vocab")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Checkpoint("missing tokenizer vocab".into()))?,
        );
        let mut model = SpeechTokenizer::new(cfg, vocab, 0);
        checkpoint::restore_params(&model.params(), &arrays)?;
        model.mark_codebook_warm();
        Ok(model)
    }
}

fn sum_tensors(ts: &[Tensor]) -> Tensor {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = acc.add(t);
    }
    acc
}
