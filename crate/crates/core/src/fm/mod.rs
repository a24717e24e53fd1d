//! Conditional latent flow matching.
//!
//! A bidirectional transformer regresses the optimal-transport target field
//! along the noise-to-data path, conditioned per frame on the upsampled
//! autoregressive hidden states, a speaker embedding from this stage's own
//! encoder, a sinusoidal embedding of the path time, and a prompt-frame
//! indicator. Sampling is Euler integration of the learned field; prompt
//! frames are overwritten with the provided clean latents around every
//! step, so they survive to the output exactly.

use crate::ar::ConditionStream;
use crate::config::FmConfig;
use crate::nn::{sinusoidal_embedding, LayerNorm, Linear, TransformerBlock};
use crate::speaker::{SpeakerCondition, SpeakerEncoder};
use crate::{Error, Result};
use chorale_autograd::{checkpoint, rng, Adam, ParamSet, Tensor};
use ndarray::{Array1, Array2, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Latent frames per audio token (50 latent frames/s over 25 tokens/s).
pub const LATENTS_PER_TOKEN: usize = 2;

/// One point on the interpolation path between noise and data.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub t: f64,
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub x_t: Array2<f64>,
    pub u_t: Array2<f64>,
    pub sigma_min: f64,
}

/// `x_t = (1 - (1 - sigma_min) t) x0 + t x1`,
/// `u_t = x1 - (1 - sigma_min) x0`.
pub fn cfm_sample_path(
    x1: &Array2<f64>,
    x0: &Array2<f64>,
    t: f64,
    sigma_min: f64,
) -> Result<PathSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("path time {t} outside [0, 1]")));
    }
    if x1.dim() != x0.dim() {
        return Err(Error::Shape("path endpoints must share a shape".into()));
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    let x_t = x0 * a + x1 * t;
    let u_t = x1 - &(x0 * (1.0 - sigma_min));
    Ok(PathSample {
        t,
        x0: x0.clone(),
        x1: x1.clone(),
        x_t,
        u_t,
        sigma_min,
    })
}

/// Conditioning bundle for generation.
pub struct FmCondition {
    /// Upsampled + projected AR hidden states, `[T_lat, width]` with
    /// `T_lat = 2 * N_tok`.
    pub cond_frames: Array2<f64>,
    pub speaker: SpeakerCondition,
    pub prompt_mask: Vec<bool>,
    /// Clean latents on prompt frames, `[T_lat, d_lat]` (rows off the mask
    /// are ignored).
    pub x_p: Option<Array2<f64>>,
}

pub struct FmTrainItem {
    /// Target latents `[T, d_lat]` (flow-VAE encoder means).
    pub z: Array2<f64>,
    /// Teacher-forced AR hidden states `[N_tok, d_model]`.
    pub c: Array2<f64>,
    /// Reference mel for this stage's speaker encoder.
    pub ref_mel: Array2<f64>,
}

pub struct FmModel {
    pub cfg: FmConfig,
    cond_proj: Linear,
    in_proj: Linear,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    out: Linear,
}

impl FmModel {
    pub fn new(cfg: FmConfig, seed: u64) -> Self {
        let mut r = rng::substream(seed, "fm-model");
        let w = cfg.width;
        let in_dim = cfg.latent_dim + w + cfg.spk_dim + cfg.t_embed_dim + 1;
        FmModel {
            cond_proj: Linear::new(cfg.cond_dim, w, &mut r),
            in_proj: Linear::new(in_dim, w, &mut r),
            blocks: (0..cfg.layers)
                .map(|_| TransformerBlock::new(w, cfg.heads, cfg.ff_mult, &mut r))
                .collect(),
            ln_f: LayerNorm::new(w),
            out: Linear::small(w, cfg.latent_dim, 1e-3, &mut r),
            cfg,
        }
    }

    /// Nearest-repeat x2 along time, then a linear projection into the
    /// model width. Output length is always `2 * N_tok`.
    pub fn upsample_condition(&self, c: &ConditionStream) -> Result<Array2<f64>> {
        let t = self.upsample_condition_tensor(&Tensor::constant(c.frames.clone().into_dyn()))?;
        let d = t.data();
        Ok(d.view().into_dimensionality::<Ix2>().unwrap().to_owned())
    }

    pub fn upsample_condition_tensor(&self, c: &Tensor) -> Result<Tensor> {
        let n = c.shape()[0];
        if n == 0 {
            return Err(Error::InvalidInput("empty condition stream".into()));
        }
        let repeated = repeat_rows_x2(c);
        Ok(self.cond_proj.forward(&repeated))
    }

    /// Predicted vector field for a frame-wise state `x_in` `[T, d_lat]`.
    pub fn field(
        &self,
        x_in: &Tensor,
        cond_frames: &Tensor,
        v: &Tensor,
        t: f64,
        prompt_mask: &[bool],
    ) -> Tensor {
        let frames = x_in.shape()[0];
        assert_eq!(cond_frames.shape()[0], frames, "condition/state length mismatch");
        let ones = Tensor::constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[frames, 1]), 1.0));
        let v_rows = ones.matmul(&v.reshape(&[1, self.cfg.spk_dim]));
        let temb = sinusoidal_embedding(t, self.cfg.t_embed_dim);
        let temb_rows = ones.matmul(&Tensor::constant(
            temb.insert_axis(ndarray::Axis(0)).into_dyn(),
        ));
        let flag: Array2<f64> = Array2::from_shape_fn((frames, 1), |(i, _)| {
            if prompt_mask.get(i).copied().unwrap_or(false) {
                1.0
            } else {
                0.0
            }
        });
        let x = Tensor::concat(
            1,
            &[
                x_in.clone(),
                cond_frames.clone(),
                v_rows,
                temb_rows,
                Tensor::constant(flag.into_dyn()),
            ],
        );
        let mut h = self.in_proj.forward(&x);
        for block in &self.blocks {
            h = block.forward(&h, false, None);
        }
        self.out.forward(&self.ln_f.forward(&h))
    }

    /// One optimizer step of the conditional flow-matching objective, with
    /// prompt inpainting applied per item with probability `p_prompt`.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &self,
        batch: &[FmTrainItem],
        spk: &SpeakerEncoder,
        params: &ParamSet,
        opt: &mut Adam,
        p_prompt: f64,
        step: u64,
        r: &mut ChaCha8Rng,
    ) -> Result<f64> {
        assert!(!batch.is_empty());
        let mut terms = Vec::new();
        let mut weights = 0.0;
        for item in batch {
            let c_up = self.upsample_condition_tensor(&Tensor::constant(item.c.clone().into_dyn()))?;
            let t_lat = item.z.nrows().min(c_up.shape()[0]);
            if t_lat == 0 {
                return Err(Error::InvalidInput("empty latent/condition pair".into()));
            }
            let z = item.z.slice(ndarray::s![..t_lat, ..]).to_owned();
            let c_up = c_up.narrow(0, 0, t_lat);

            let t = r.gen_range(0.0..1.0);
            let x0arr = rng::randn(&[t_lat, self.cfg.latent_dim], r)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let path = cfm_sample_path(&z, &x0arr, t, self.cfg.sigma_min)?;

            let mut prompt_mask = vec![false; t_lat];
            if r.gen_range(0.0..1.0) < p_prompt {
                let frac = r.gen_range(0.10..0.50);
                let len = ((t_lat as f64) * frac).round() as usize;
                for m in prompt_mask.iter_mut().take(len.min(t_lat)) {
                    *m = true;
                }
            }
            // Model input: clean latents on prompt frames, x_t elsewhere.
            let mut x_in = path.x_t.clone();
            for (i, &p) in prompt_mask.iter().enumerate() {
                if p {
                    x_in.row_mut(i).assign(&z.row(i));
                }
            }
            let v = spk.forward(&Tensor::constant(item.ref_mel.clone().into_dyn()));
            let pred = self.field(
                &Tensor::constant(x_in.into_dyn()),
                &c_up,
                &v,
                t,
                &prompt_mask,
            );
            // Squared error masked to non-prompt frames.
            let mask: Array2<f64> = Array2::from_shape_fn((t_lat, 1), |(i, _)| {
                if prompt_mask[i] {
                    0.0
                } else {
                    1.0
                }
            });
            let n_active = mask.sum() * self.cfg.latent_dim as f64;
            if n_active == 0.0 {
                continue;
            }
            let err = pred
                .sub(&Tensor::constant(path.u_t.into_dyn()))
                .square()
                .mul(&Tensor::constant(mask.into_dyn()))
                .sum();
            terms.push(err);
            weights += n_active;
        }
        if terms.is_empty() {
            return Ok(0.0);
        }
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = acc.add(t);
        }
        let loss = acc.scale(1.0 / weights);
        let v = loss.value();
        if !v.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: "flow-matching mse".into(),
            });
        }
        loss.backward();
        opt.step(params);
        Ok(v)
    }

    /// Euler sampling from seeded noise. Prompt frames are overwritten with
    /// the provided latents before every field evaluation and after the
    /// final step.
    pub fn generate(&self, cond: &FmCondition, steps: usize, seed: u64) -> Result<Array2<f64>> {
        if steps == 0 {
            return Err(Error::InvalidInput("sampler needs at least one step".into()));
        }
        let t_lat = cond.cond_frames.nrows();
        if t_lat == 0 {
            return Err(Error::InvalidInput("empty condition".into()));
        }
        let mut r = rng::substream(seed, "fm-generate");
        let x0 = rng::randn(&[t_lat, self.cfg.latent_dim], &mut r)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let cond_t = Tensor::constant(cond.cond_frames.clone().into_dyn());
        let v = Tensor::constant(cond.speaker.vector.clone().into_dyn());
        let mask = &cond.prompt_mask;
        let x = euler_integrate(
            |state, t| {
                let pred = self.field(
                    &Tensor::constant(state.clone().into_dyn()),
                    &cond_t,
                    &v,
                    t,
                    mask,
                );
                let d = pred.data();
                d.view().into_dimensionality::<Ix2>().unwrap().to_owned()
            },
            x0,
            steps,
            if cond.x_p.is_some() {
                Some((mask.as_slice(), cond.x_p.as_ref().unwrap()))
            } else {
                None
            },
        );
        Ok(x)
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.cond_proj.collect(&mut ps, "cond_proj");
        self.in_proj.collect(&mut ps, "in_proj");
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&mut ps, &format!("block{i}"));
        }
        self.ln_f.collect(&mut ps, "ln_f");
        self.out.collect(&mut ps, "out");
        ps
    }
}

/// Plain Euler integrator over `[0, 1]` with uniform steps and prompt
/// overwrite; factored out so tests can drive it with closed-form fields.
pub fn euler_integrate(
    field: impl Fn(&Array2<f64>, f64) -> Array2<f64>,
    x0: Array2<f64>,
    steps: usize,
    prompt: Option<(&[bool], &Array2<f64>)>,
) -> Array2<f64> {
    let dt = 1.0 / steps as f64;
    let overwrite = |x: &mut Array2<f64>| {
        if let Some((mask, xp)) = prompt {
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    x.row_mut(i).assign(&xp.row(i));
                }
            }
        }
    };
    let mut x = x0;
    for i in 0..steps {
        overwrite(&mut x);
        let t = i as f64 * dt;
        let u = field(&x, t);
        x = x + u * dt;
    }
    overwrite(&mut x);
    x
}

fn repeat_rows_x2(x: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    Tensor::concat(1, &[x.clone(), x.clone()]).reshape(&[2 * n, d])
}

/// Save the flow-matching stage (field model + its speaker encoder).
pub fn save_fm_stage(dir: &Path, fm: &FmModel, spk: &SpeakerEncoder) -> Result<()> {
    let mut ps = fm.params().prefixed("fm");
    ps.extend(spk.params().prefixed("spk"));
    let config = serde_json::json!({
        "kind": "fm_stage",
        "fm": fm.cfg,
        "speaker": spk.cfg,
    });
    checkpoint::save(dir, &ps, &config)?;
    Ok(())
}

pub fn load_fm_stage(dir: &Path) -> Result<(FmModel, SpeakerEncoder)> {
    let (arrays, config) = checkpoint::load(dir)?;
    let fm_cfg: FmConfig = serde_json::from_value(
        config
            .get("fm")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing fm config".into()))?,
    )?;
    let spk_cfg: crate::config::SpeakerEncoderConfig = serde_json::from_value(
        config
            .get("speaker")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing fm speaker config".into()))?,
    )?;
    let fm = FmModel::new(fm_cfg, 0);
    let spk = SpeakerEncoder::new(spk_cfg, 0);
    let mut ps = fm.params().prefixed("fm");
    ps.extend(spk.params().prefixed("spk"));
    checkpoint::restore_params(&ps, &arrays)?;
    Ok((fm, spk))
}

/// Sinusoidal embedding helper re-exported for tests.
pub fn time_embedding(t: f64, dim: usize) -> Array1<f64> {
    sinusoidal_embedding(t, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn path_endpoints() {
        let x0 = array![[1.0, -2.0]];
        let x1 = array![[3.0, 4.0]];
        let p0 = cfm_sample_path(&x1, &x0, 0.0, 0.0).unwrap();
        assert_eq!(p0.x_t, x0);
        let p1 = cfm_sample_path(&x1, &x0, 1.0, 0.0).unwrap();
        assert_eq!(p1.x_t, x1);
        assert_eq!(p1.u_t, &x1 - &x0);
    }

    #[test]
    fn path_midpoint_hand_case() {
        let x0 = array![[0.0]];
        let x1 = array![[2.0]];
        let p = cfm_sample_path(&x1, &x0, 0.5, 0.0).unwrap();
        assert_eq!(p.x_t[[0, 0]], 1.0);
        assert_eq!(p.u_t[[0, 0]], 2.0);
    }

    #[test]
    fn path_respects_sigma_min() {
        let x0 = array![[1.0]];
        let x1 = array![[0.0]];
        let s = 1e-4;
        let p = cfm_sample_path(&x1, &x0, 1.0, s).unwrap();
        assert!((p.x_t[[0, 0]] - s).abs() < 1e-15);
        assert!((p.u_t[[0, 0]] + (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn time_outside_unit_interval_is_an_error() {
        let x = array![[0.0]];
        assert!(cfm_sample_path(&x, &x, -0.1, 0.0).is_err());
        assert!(cfm_sample_path(&x, &x, 1.1, 0.0).is_err());
    }

    #[test]
    fn euler_single_step_constant_field() {
        let x0 = array![[1.0, 2.0]];
        let out = euler_integrate(|_, _| array![[3.0, -1.0]], x0.clone(), 1, None);
        assert_eq!(out, &x0 + &array![[3.0, -1.0]]);
    }

    #[test]
    fn euler_converges_to_exponential_decay() {
        // u = -x has the exact solution x0 * e^{-1} at t = 1.
        let x0 = array![[1.0]];
        let out = euler_integrate(|x, _| -x.clone(), x0, 1000, None);
        assert!((out[[0, 0]] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn prompt_frames_pass_through_exactly() {
        let x0 = array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let xp = array![[9.0, 9.0], [8.0, 8.0], [7.0, 7.0]];
        let mask = vec![true, false, true];
        let out = euler_integrate(
            |_, _| array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]],
            x0,
            4,
            Some((&mask, &xp)),
        );
        assert_eq!(out.row(0).to_vec(), vec![9.0, 9.0]);
        assert_eq!(out.row(2).to_vec(), vec![7.0, 7.0]);
        assert!((out[[1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_doubles_and_pairs_rows() {
        let fm = FmModel::new(crate::config::FmConfig::small(), 5);
        let c = ConditionStream {
            frames: Array2::from_shape_fn((5, fm.cfg.cond_dim), |(i, j)| (i * 100 + j) as f64),
        };
        let up = fm.upsample_condition(&c).unwrap();
        assert_eq!(up.nrows(), 10);
        assert_eq!(up.nrows() % 2, 0);
        for k in 0..5 {
            for j in 0..up.ncols() {
                assert!((up[[2 * k, j]] - up[[2 * k + 1, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_projection_is_linear_pre_bias() {
        let fm = FmModel::new(crate::config::FmConfig::small(), 6);
        let mut r = chorale_autograd::rng::seeded(7);
        let frames = chorale_autograd::rng::randn(&[3, fm.cfg.cond_dim], &mut r)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let a = 2.5;
        let up1 = fm.upsample_condition(&ConditionStream { frames: frames.clone() }).unwrap();
        let up_a = fm
            .upsample_condition(&ConditionStream { frames: &frames * a })
            .unwrap();
        let up0 = fm
            .upsample_condition(&ConditionStream {
                frames: Array2::zeros((3, fm.cfg.cond_dim)),
            })
            .unwrap();
        // u(a c) - u(0) = a (u(c) - u(0))
        let lhs = &up_a - &up0;
        let rhs = (&up1 - &up0) * a;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_condition_is_an_error() {
        let fm = FmModel::new(crate::config::FmConfig::small(), 8);
        let c = ConditionStream {
            frames: Array2::zeros((0, fm.cfg.cond_dim)),
        };
        assert!(fm.upsample_condition(&c).is_err());
    }

    #[test]
    fn generation_is_deterministic_in_seed_and_steps() {
        let fm = FmModel::new(crate::config::FmConfig::small(), 9);
        let mut r = chorale_autograd::rng::seeded(10);
        let cond = FmCondition {
            cond_frames: chorale_autograd::rng::randn(&[6, fm.cfg.width], &mut r)
                .into_dimensionality::<Ix2>()
                .unwrap(),
            speaker: crate::speaker::SpeakerCondition {
                vector: ndarray::Array1::from_elem(fm.cfg.spk_dim, 0.1),
                source: crate::speaker::ConditionSource::Encoder,
            },
            prompt_mask: vec![false; 6],
            x_p: None,
        };
        let a = fm.generate(&cond, 4, 42).unwrap();
        let b = fm.generate(&cond, 4, 42).unwrap();
        assert_eq!(a, b);
        let c = fm.generate(&cond, 4, 43).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }
}
