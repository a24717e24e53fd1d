//! Adam optimizer with optional global-norm gradient clipping.

use crate::tensor::ParamSet;
use ndarray::ArrayD;
use std::collections::BTreeMap;

struct Slot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient, then zero the
    /// gradients.
    pub fn step(&mut self, params: &ParamSet) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        let scale = match self.clip_norm {
            Some(c) => {
                let mut sq = 0.0;
                for (_, p) in params.iter() {
                    if let Some(g) = p.grad() {
                        sq += g.iter().map(|x| x * x).sum::<f64>();
                    }
                }
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        for (name, p) in params.iter() {
            let Some(mut g) = p.grad() else { continue };
            if scale != 1.0 {
                g.mapv_inplace(|x| x * scale);
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
            });
            slot.m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            slot.v
                .zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut data = p.data_mut();
            ndarray::Zip::from(&mut *data)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.zero_grad();
        }
    }

    /// Flatten optimizer state into named arrays for trainer snapshots.
    pub fn export_state(&self) -> (u64, BTreeMap<String, ArrayD<f64>>) {
        let mut out = BTreeMap::new();
        for (name, slot) in &self.slots {
            out.insert(format!("{name}#m"), slot.m.clone());
            out.insert(format!("{name}#v"), slot.v.clone());
        }
        (self.step, out)
    }

    pub fn import_state(&mut self, step: u64, arrays: &BTreeMap<String, ArrayD<f64>>) {
        self.step = step;
        self.slots.clear();
        for (key, arr) in arrays {
            if let Some(name) = key.strip_suffix("#m") {
                let v_key = format!("{name}#v");
                if let Some(v) = arrays.get(&v_key) {
                    self.slots.insert(
                        name.to_string(),
                        Slot {
                            m: arr.clone(),
                            v: v.clone(),
                        },
                    );
                }
            }
        }
    }
}
