//! Invertible affine coupling stack.
//!
//! Each block reverses the channel order, then conditions an affine
//! (log-scale, shift) transform of the second half on the first half.
//! Conditioner outputs are zero-initialized so a fresh flow is exactly the
//! identity with zero log-determinant. The transform is frame-wise, so the
//! Jacobian is block-diagonal and the log-determinant per frame is the sum
//! of the applied log-scales.

use crate::nn::Linear;
use chorale_autograd::{rng, ParamSet, Tensor};

pub enum FlowDirection {
    ToPrior,
    FromPrior,
}

struct CouplingBlock {
    c1: Linear,
    c2: Linear, // zero-init; emits [log_s | shift] for the second half
}

pub struct FlowTransform {
    blocks: Vec<CouplingBlock>,
    pub dim: usize,
    scale_log_min: f64,
    scale_log_max: f64,
}

impl FlowTransform {
    pub fn new(
        dim: usize,
        num_blocks: usize,
        hidden: usize,
        scale_log_min: f64,
        scale_log_max: f64,
        seed: u64,
    ) -> Self {
        assert!(dim % 2 == 0, "coupling split needs an even latent dim");
        let mut r = rng::substream(seed, "flow");
        let half = dim / 2;
        let blocks = (0..num_blocks)
            .map(|_| CouplingBlock {
                c1: Linear::new(half, hidden, &mut r),
                c2: Linear::zeros(hidden, dim),
            })
            .collect();
        FlowTransform {
            blocks,
            dim,
            scale_log_min,
            scale_log_max,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `ToPrior` maps latents toward the standard normal, accumulating
    /// `log|det dz~/dz|` per frame; `FromPrior` is the exact inverse with
    /// a negated log-determinant.
    pub fn transform(&self, z: &Tensor, dir: FlowDirection) -> (Tensor, Tensor) {
        let t = z.shape()[0];
        let mut x = z.clone();
        let mut log_det = Tensor::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[t])));
        match dir {
            FlowDirection::ToPrior => {
                for b in &self.blocks {
                    x = reverse_channels(&x);
                    let (y, ld) = self.couple_forward(b, &x);
                    x = y;
                    log_det = log_det.add(&ld);
                }
            }
            FlowDirection::FromPrior => {
                for b in self.blocks.iter().rev() {
                    let (y, ld) = self.couple_inverse(b, &x);
                    x = reverse_channels(&y);
                    log_det = log_det.sub(&ld);
                }
            }
        }
        (x, log_det)
    }

    fn conditioner(&self, b: &CouplingBlock, x1: &Tensor) -> (Tensor, Tensor) {
        let h = b.c2.forward(&b.c1.forward(x1).relu());
        let half = self.dim / 2;
        let log_s = h
            .narrow(1, 0, half)
            .clamp_op(self.scale_log_min, self.scale_log_max);
        let shift = h.narrow(1, half, half);
        (log_s, shift)
    }

    fn couple_forward(&self, b: &CouplingBlock, x: &Tensor) -> (Tensor, Tensor) {
        let half = self.dim / 2;
        let x1 = x.narrow(1, 0, half);
        let x2 = x.narrow(1, half, half);
        let (log_s, shift) = self.conditioner(b, &x1);
        let y2 = x2.mul(&log_s.exp()).add(&shift);
        (Tensor::concat(1, &[x1, y2]), log_s.sum_axis_op(1))
    }

    fn couple_inverse(&self, b: &CouplingBlock, y: &Tensor) -> (Tensor, Tensor) {
        let half = self.dim / 2;
        let y1 = y.narrow(1, 0, half);
        let y2 = y.narrow(1, half, half);
        let (log_s, shift) = self.conditioner(b, &y1);
        let x2 = y2.sub(&shift).mul(&log_s.neg().exp());
        (Tensor::concat(1, &[y1, x2]), log_s.sum_axis_op(1))
    }

    pub fn collect(&self, ps: &mut ParamSet, prefix: &str) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.c1.collect(ps, &format!("{prefix}.block{i}.c1"));
            b.c2.collect(ps, &format!("{prefix}.block{i}.c2"));
        }
    }

    /// Randomize conditioner weights (tests that need a non-identity flow).
    pub fn randomize(&self, std: f64, seed: u64) {
        let mut r = rng::substream(seed, "flow-randomize");
        for b in &self.blocks {
            let shape = b.c2.w.shape();
            *b.c2.w.data_mut() = rng::randn_scaled(&shape, std, &mut r);
            let bshape = b.c2.b.shape();
            *b.c2.b.data_mut() = rng::randn_scaled(&bshape, std, &mut r);
        }
    }
}

fn reverse_channels(x: &Tensor) -> Tensor {
    let d = x.shape()[1];
    let idx: Vec<usize> = (0..d).rev().collect();
    x.transpose2().gather_rows(&idx).transpose2()
}
