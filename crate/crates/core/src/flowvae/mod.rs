//! Waveform autoencoder with a flow-shaped posterior.
//!
//! The strided encoder maps 16 kHz waveforms to 50 latent frames/s (total
//! stride 320, exact floor division at every stage), the transposed-conv
//! vocoder maps latents back (320 samples per frame, exactly), and an
//! invertible coupling flow transports posterior samples toward the
//! standard normal for the KL term. With `flow_blocks = 0` the model is a
//! plain VAE whose KL is taken directly against the standard normal.

pub mod flow;
pub mod loss;

use crate::config::FlowVaeConfig;
use crate::data::AudioClip;
use crate::nn::{Conv1d, ConvTranspose1d};
use crate::{Error, Result};
use chorale_autograd::{checkpoint, rng, Adam, ParamSet, Tensor};
use flow::FlowTransform;
use loss::{kl_given_sample, ms_stft_loss};
use ndarray::{Array1, Array2, Ix2};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Samples per latent frame (the encoder's total stride).
pub const SAMPLES_PER_LATENT: usize = 320;
pub const LATENT_RATE: f64 = 50.0;

/// Posterior parameters per latent frame.
#[derive(Debug, Clone)]
pub struct LatentStats {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
    pub frame_rate: f64,
}

impl LatentStats {
    pub fn num_frames(&self) -> usize {
        self.mu.nrows()
    }
}

/// Continuous latent frames (the flow-matching model's generation target).
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub z: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FlowVaeLossReport {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

pub struct FlowVae {
    pub cfg: FlowVaeConfig,
    e0: Conv1d,
    e1: Conv1d,
    r1: Conv1d,
    e2: Conv1d,
    r2: Conv1d,
    e3: Conv1d,
    head: Conv1d,
    pub flow: FlowTransform,
    d_in: Conv1d,
    d_r3: Conv1d,
    u3: ConvTranspose1d,
    d_r2: Conv1d,
    u2: ConvTranspose1d,
    d_r1: Conv1d,
    u1: ConvTranspose1d,
    u0: ConvTranspose1d,
    d_out: Conv1d,
}

impl FlowVae {
    pub fn new(cfg: FlowVaeConfig, seed: u64) -> Self {
        let mut r = rng::substream(seed, "flowvae");
        let [c0, c1, c2, c3] = cfg.channels;
        let d = cfg.latent_dim;
        let model = FlowVae {
            e0: Conv1d::new(1, c0, 8, 4, 2, &mut r),
            e1: Conv1d::new(c0, c1, 8, 4, 2, &mut r),
            r1: Conv1d::new(c1, c1, 5, 1, 2, &mut r),
            e2: Conv1d::new(c1, c2, 8, 4, 2, &mut r),
            r2: Conv1d::new(c2, c2, 5, 1, 2, &mut r),
            e3: Conv1d::new(c2, c3, 5, 5, 0, &mut r),
            head: Conv1d::new(c3, 2 * d, 3, 1, 1, &mut r),
            flow: FlowTransform::new(
                d,
                cfg.flow_blocks,
                cfg.flow_hidden,
                cfg.scale_log_min,
                cfg.scale_log_max,
                seed,
            ),
            d_in: Conv1d::new(d, c3, 3, 1, 1, &mut r),
            d_r3: Conv1d::new(c3, c3, 3, 1, 1, &mut r),
            u3: ConvTranspose1d::new(c3, c2, 5, 5, 0, &mut r),
            d_r2: Conv1d::new(c2, c2, 5, 1, 2, &mut r),
            u2: ConvTranspose1d::new(c2, c1, 8, 4, 2, &mut r),
            d_r1: Conv1d::new(c1, c1, 5, 1, 2, &mut r),
            u1: ConvTranspose1d::new(c1, c0, 8, 4, 2, &mut r),
            u0: ConvTranspose1d::new(c0, 1, 8, 4, 2, &mut r),
            d_out: Conv1d::new(1, 1, 9, 1, 4, &mut r),
            cfg,
        };
        // Start the posterior narrow: log-sigma bias at -2 keeps early
        // latents informative instead of noise-dominated.
        {
            let d = model.cfg.latent_dim;
            let mut b = model.head.b.data_mut();
            for j in d..2 * d {
                b[[j]] = -2.0;
            }
        }
        model
    }

    /// Posterior parameters for a waveform tensor `[N]`. `floor(N/320)`
    /// frames, log-sigma clamped to the configured range.
    pub fn encode(&self, wave: &Tensor) -> (Tensor, Tensor) {
        let n = wave.shape()[0];
        let x = wave.reshape(&[n, 1]);
        let x = self.e0.forward(&x).leaky_relu(0.1);
        let x = self.e1.forward(&x).leaky_relu(0.1);
        let x = self.r1.forward(&x).leaky_relu(0.1);
        let x = self.e2.forward(&x).leaky_relu(0.1);
        let x = self.r2.forward(&x).leaky_relu(0.1);
        let x = self.e3.forward(&x).leaky_relu(0.1);
        let h = self.head.forward(&x);
        let d = self.cfg.latent_dim;
        let mu = h.narrow(1, 0, d);
        let log_sigma = h
            .narrow(1, d, d)
            .clamp_op(self.cfg.log_sigma_min, self.cfg.log_sigma_max);
        (mu, log_sigma)
    }

    /// Inference entry point over a clip.
    pub fn fv_encode(&self, clip: &AudioClip) -> Result<LatentStats> {
        if clip.len() < SAMPLES_PER_LATENT {
            return Err(Error::InvalidInput(format!(
                "{} samples is below one latent frame ({SAMPLES_PER_LATENT})",
                clip.len()
            )));
        }
        let wave = Tensor::constant(clip.samples.clone().into_dyn());
        let (mu, log_sigma) = self.encode(&wave);
        Ok(LatentStats {
            mu: to2(&mu),
            log_sigma: to2(&log_sigma),
            frame_rate: LATENT_RATE,
        })
    }

    /// Pre-clamp waveform tensor `[320*T]` for a latent tensor `[T, d]`.
    /// Output is `2*tanh(raw)`, so it lives in (-2, 2).
    pub fn decode_tensor(&self, z: &Tensor) -> Tensor {
        let x = self.d_in.forward(z).leaky_relu(0.1);
        let x = self.d_r3.forward(&x).leaky_relu(0.1);
        let x = self.u3.forward(&x).leaky_relu(0.1);
        let x = self.d_r2.forward(&x).leaky_relu(0.1);
        let x = self.u2.forward(&x).leaky_relu(0.1);
        let x = self.d_r1.forward(&x).leaky_relu(0.1);
        let x = self.u1.forward(&x).leaky_relu(0.1);
        let x = self.u0.forward(&x);
        let y = self.d_out.forward(&x).tanh_op().scale(2.0);
        let n = y.shape()[0];
        y.reshape(&[n])
    }

    /// Vocoder: latents to an audio clip, clamped to `[-1, 1]`.
    pub fn fv_decode(&self, z: &LatentSequence) -> Result<AudioClip> {
        if z.z.nrows() == 0 {
            return Err(Error::InvalidInput("empty latent sequence".into()));
        }
        if z.z.ncols() != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "latent dim {} does not match model {}",
                z.z.ncols(),
                self.cfg.latent_dim
            )));
        }
        let zt = Tensor::constant(z.z.clone().into_dyn());
        let y = self.decode_tensor(&zt);
        let samples: Array1<f64> = y.data().iter().map(|&v| v.clamp(-1.0, 1.0)).collect();
        AudioClip::new(samples, 16_000)
    }

    /// One optimizer step: multi-scale STFT reconstruction plus the
    /// flow-transported KL, jointly over encoder, flow, and decoder.
    pub fn train_step(
        &self,
        batch: &[Array1<f64>],
        params: &ParamSet,
        opt: &mut Adam,
        step: u64,
        r: &mut ChaCha8Rng,
    ) -> Result<FlowVaeLossReport> {
        assert!(!batch.is_empty());
        let b = batch.len() as f64;
        let mut recon_terms = Vec::new();
        let mut kl_terms = Vec::new();
        for wave in batch {
            let n_lat = wave.len() / SAMPLES_PER_LATENT;
            if n_lat == 0 {
                return Err(Error::InvalidInput("crop below one latent frame".into()));
            }
            let x = Tensor::constant(wave.clone().into_dyn());
            let (mu, log_sigma) = self.encode(&x);
            let eps = Tensor::constant(rng::randn(&[n_lat, self.cfg.latent_dim], r));
            let z = mu.add(&log_sigma.exp().mul(&eps));
            let y = self.decode_tensor(&z);
            let target = x.narrow(0, 0, n_lat * SAMPLES_PER_LATENT);
            recon_terms.push(ms_stft_loss(&target, &y));
            kl_terms.push(kl_given_sample(&z, &mu, &log_sigma, &self.flow));
        }
        let recon = sum_tensors(&recon_terms).scale(1.0 / b);
        let kl = sum_tensors(&kl_terms).scale(1.0 / b);
        let total = recon.add(&kl.scale(self.cfg.kl_weight));
        let report = FlowVaeLossReport {
            recon: recon.value(),
            kl: kl.value(),
            total: total.value(),
        };
        if !report.total.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: format!("recon={} kl={}", report.recon, report.kl),
            });
        }
        total.backward();
        opt.step(params);
        Ok(report)
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.e0.collect(&mut ps, "enc.e0");
        self.e1.collect(&mut ps, "enc.e1");
        self.r1.collect(&mut ps, "enc.r1");
        self.e2.collect(&mut ps, "enc.e2");
        self.r2.collect(&mut ps, "enc.r2");
        self.e3.collect(&mut ps, "enc.e3");
        self.head.collect(&mut ps, "enc.head");
        self.flow.collect(&mut ps, "flow");
        self.d_in.collect(&mut ps, "dec.in");
        self.d_r3.collect(&mut ps, "dec.r3");
        self.u3.collect(&mut ps, "dec.u3");
        self.d_r2.collect(&mut ps, "dec.r2");
        self.u2.collect(&mut ps, "dec.u2");
        self.d_r1.collect(&mut ps, "dec.r1");
        self.u1.collect(&mut ps, "dec.u1");
        self.u0.collect(&mut ps, "dec.u0");
        self.d_out.collect(&mut ps, "dec.out");
        ps
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = serde_json::json!({ "kind": "flowvae", "config": self.cfg });
        checkpoint::save(dir, &self.params(), &config)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (arrays, config) = checkpoint::load(dir)?;
        let cfg: FlowVaeConfig = serde_json::from_value(
            config
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing flowvae config".into()))?,
        )?;
        let model = FlowVae::new(cfg, 0);
        checkpoint::restore_params(&model.params(), &arrays)?;
        Ok(model)
    }
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.data().view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn sum_tensors(ts: &[Tensor]) -> Tensor {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = acc.add(t);
    }
    acc
}
