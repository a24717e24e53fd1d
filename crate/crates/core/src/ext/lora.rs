//! Per-emotion LoRA adapters on the autoregressive model's attention
//! projections (q, k, v, o of every block). Base weights are never
//! touched: the adapter contributes `scale * (x @ A) @ B` alongside each
//! projection, and removing it restores bitwise base behavior.

use crate::ar::{ArModel, SequenceLayout};
use crate::nn::{BlockDeltas, ProjDelta};
use crate::speaker::SpeakerEncoder;
use crate::{Error, Result};
use chorale_autograd::{checkpoint, rng, Adam, ParamSet, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

struct LayerMats {
    // (A [d, r], B [r, d]) per target projection, in LORA_TARGETS order.
    mats: Vec<(Tensor, Tensor)>,
}

pub struct LoraAdapter {
    pub emotion: String,
    pub rank: usize,
    pub alpha: f64,
    pub d_model: usize,
    layers: Vec<LayerMats>,
}

#[derive(Serialize, Deserialize)]
struct AdapterManifest {
    emotion: String,
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
    layers: usize,
    d_model: usize,
}

impl LoraAdapter {
    /// Fresh adapter: A is small random, B is zero, so the initial delta is
    /// exactly zero.
    pub fn new(emotion: &str, rank: usize, alpha: f64, layers: usize, d_model: usize, seed: u64) -> Self {
        let mut r = rng::substream(seed, "lora");
        let layers = (0..layers)
            .map(|_| LayerMats {
                mats: (0..LORA_TARGETS.len())
                    .map(|_| {
                        (
                            Tensor::param(rng::randn_scaled(&[d_model, rank], 0.02, &mut r)),
                            Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[rank, d_model]))),
                        )
                    })
                    .collect(),
            })
            .collect();
        LoraAdapter {
            emotion: emotion.to_string(),
            rank,
            alpha,
            d_model,
            layers,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-block deltas for a forward pass. Errors when the adapter was
    /// trained against a different architecture.
    pub fn deltas_for(&self, model: &ArModel) -> Result<Vec<BlockDeltas>> {
        if model.num_layers() != self.layers.len() || model.cfg.d_model != self.d_model {
            return Err(Error::InvalidInput(format!(
                "adapter ({} layers, d={}) does not match model ({} layers, d={})",
                self.layers.len(),
                self.d_model,
                model.num_layers(),
                model.cfg.d_model
            )));
        }
        Ok(self
            .layers
            .iter()
            .map(|l| BlockDeltas {
                q: Some(self.delta(&l.mats[0])),
                k: Some(self.delta(&l.mats[1])),
                v: Some(self.delta(&l.mats[2])),
                o: Some(self.delta(&l.mats[3])),
            })
            .collect())
    }

    fn delta(&self, m: &(Tensor, Tensor)) -> ProjDelta {
        ProjDelta {
            a: m.0.clone(),
            b: m.1.clone(),
            scale: self.scale(),
        }
    }

    /// Effective weight delta `scale * A @ B` for one projection (rank
    /// checks and diagnostics).
    pub fn delta_matrix(&self, layer: usize, target: usize) -> Array2<f64> {
        let (a, b) = &self.layers[layer].mats[target];
        let a2 = a.data().view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let b2 = b.data().view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        a2.dot(&b2) * self.scale()
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (j, name) in LORA_TARGETS.iter().enumerate() {
                ps.push(format!("layer{i}.{name}.a"), l.mats[j].0.clone());
                ps.push(format!("layer{i}.{name}.b"), l.mats[j].1.clone());
            }
        }
        ps
    }

    /// Writes `emotion_<name>.ckpt/` (checkpoint layout) plus
    /// `emotion_<name>.json` beside it.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let manifest = AdapterManifest {
            emotion: self.emotion.clone(),
            rank: self.rank,
            alpha: self.alpha,
            targets: LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
            layers: self.layers.len(),
            d_model: self.d_model,
        };
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join(format!("emotion_{}.ckpt", self.emotion));
        checkpoint::save(&ckpt, &self.params(), &serde_json::to_value(&manifest)?)?;
        std::fs::write(
            dir.join(format!("emotion_{}.json", self.emotion)),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(ckpt)
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let (arrays, config) = checkpoint::load(ckpt)?;
        let manifest: AdapterManifest = serde_json::from_value(config)?;
        let adapter = LoraAdapter::new(
            &manifest.emotion,
            manifest.rank,
            manifest.alpha,
            manifest.layers,
            manifest.d_model,
            0,
        );
        checkpoint::restore_params(&adapter.params(), &arrays)?;
        Ok(adapter)
    }
}

/// Train one adapter on prepared (layout, reference-mel) items against a
/// frozen base. Only the A/B matrices receive gradients.
#[allow(clippy::too_many_arguments)]
pub fn lora_train(
    items: &[(SequenceLayout, Array2<f64>)],
    ar: &ArModel,
    spk: &SpeakerEncoder,
    emotion: &str,
    rank: usize,
    alpha: f64,
    steps: u64,
    lr: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty emotion dataset".into()));
    }
    ar.params().freeze_all();
    spk.params().freeze_all();
    let adapter = LoraAdapter::new(emotion, rank, alpha, ar.num_layers(), ar.cfg.d_model, seed);
    let deltas = adapter.deltas_for(ar)?;
    let params = adapter.params();
    let mut opt = Adam::new(lr);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(items.len());
        for (layout, ref_mel) in items {
            let cond = spk.forward(&Tensor::constant(ref_mel.clone().into_dyn()));
            batch.push((layout, cond));
        }
        let loss = ar.batch_loss(&batch, Some(&deltas));
        let v = loss.value();
        if !v.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: "lora cross-entropy".into(),
            });
        }
        loss.backward();
        opt.step(&params);
    }
    Ok(adapter)
}
