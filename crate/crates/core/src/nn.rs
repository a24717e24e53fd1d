//! Small neural-net building blocks shared by the model stack.

use chorale_autograd::{rng, ParamSet, Tensor};
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

pub struct Linear {
    pub w: Tensor, // [d_in, d_out]
    pub b: Tensor, // [d_out]
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, r: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Tensor::param(rng::randn_scaled(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), r)),
            b: Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[d_out]))),
        }
    }

    /// Near-zero random init: output heads start close to uniform
    /// predictions without severing the gradient path at step 0.
    pub fn small(d_in: usize, d_out: usize, std: f64, r: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Tensor::param(rng::randn_scaled(&[d_in, d_out], std, r)),
            b: Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[d_out]))),
        }
    }

    /// Zero-initialized output layer (identity-at-init flows, LoRA B).
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[d_in, d_out]))),
            b: Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[d_out]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add(&self.b)
    }

    pub fn collect(&self, ps: &mut ParamSet, prefix: &str) {
        ps.push(format!("{prefix}.w"), self.w.clone());
        ps.push(format!("{prefix}.b"), self.b.clone());
    }
}

pub struct Conv1d {
    pub w: Tensor, // [c_out, c_in, k]
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, r: &mut ChaCha8Rng) -> Self {
        Conv1d {
            w: Tensor::param(rng::kaiming(&[c_out, c_in, k], c_in * k, r)),
            b: Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv1d(&self.w, Some(&self.b), self.stride, self.pad)
    }

    pub fn collect(&self, ps: &mut ParamSet, prefix: &str) {
        ps.push(format!("{prefix}.w"), self.w.clone());
        ps.push(format!("{prefix}.b"), self.b.clone());
    }
}

pub struct ConvTranspose1d {
    pub w: Tensor, // [c_in, c_out, k]
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, r: &mut ChaCha8Rng) -> Self {
        ConvTranspose1d {
            w: Tensor::param(rng::kaiming(&[c_in, c_out, k], c_in * k, r)),
            b: Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv_transpose1d(&self.w, Some(&self.b), self.stride, self.pad)
    }

    pub fn collect(&self, ps: &mut ParamSet, prefix: &str) {
        ps.push(format!("{prefix}.w"), self.w.clone());
        ps.push(format!("{prefix}.b"), self.b.clone());
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[d]), 1.0)),
            beta: Tensor::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[d]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }

    pub fn collect(&self, ps: &mut ParamSet, prefix: &str) {
        ps.push(format!("{prefix}.gamma"), self.gamma.clone());
        ps.push(format!("{prefix}.beta"), self.beta.clone());
    }
}

/// Low-rank delta on one projection: `y += scale * (x @ A) @ B`.
pub struct ProjDelta {
    pub a: Tensor, // [d, r]
    pub b: Tensor, // [r, d]
    pub scale: f64,
}

impl ProjDelta {
    pub fn apply(&self, x: &Tensor, y: Tensor) -> Tensor {
        y.add(&x.matmul(&self.a).matmul(&self.b).scale(self.scale))
    }
}

/// Adapter deltas for one transformer block's attention projections.
#[derive(Default)]
pub struct BlockDeltas {
    pub q: Option<ProjDelta>,
    pub k: Option<ProjDelta>,
    pub v: Option<ProjDelta>,
    pub o: Option<ProjDelta>,
}

/// Pre-LN transformer block with multi-head self-attention and a GELU MLP.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl TransformerBlock {
    pub fn new(d_model: usize, heads: usize, ff_mult: usize, r: &mut ChaCha8Rng) -> Self {
        assert_eq!(d_model % heads, 0, "d_model must divide evenly into heads");
        TransformerBlock {
            ln1: LayerNorm::new(d_model),
            wq: Linear::new(d_model, d_model, r),
            wk: Linear::new(d_model, d_model, r),
            wv: Linear::new(d_model, d_model, r),
            wo: Linear::new(d_model, d_model, r),
            ln2: LayerNorm::new(d_model),
            ff1: Linear::new(d_model, d_model * ff_mult, r),
            ff2: Linear::new(d_model * ff_mult, d_model, r),
            heads,
            d_model,
        }
    }

    pub fn forward(&self, x: &Tensor, causal: bool, deltas: Option<&BlockDeltas>) -> Tensor {
        let s = x.shape()[0];
        let dh = self.d_model / self.heads;
        let xn = self.ln1.forward(x);
        let mut q = self.wq.forward(&xn);
        let mut k = self.wk.forward(&xn);
        let mut v = self.wv.forward(&xn);
        if let Some(d) = deltas {
            if let Some(dq) = &d.q {
                q = dq.apply(&xn, q);
            }
            if let Some(dk) = &d.k {
                k = dk.apply(&xn, k);
            }
            if let Some(dv) = &d.v {
                v = dv.apply(&xn, v);
            }
        }
        let mask = if causal { Some(causal_mask(s)) } else { None };
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh);
            let kh = k.narrow(1, h * dh, dh);
            let vh = v.narrow(1, h * dh, dh);
            let mut scores = qh.matmul(&kh.transpose2()).scale(1.0 / (dh as f64).sqrt());
            if let Some(m) = &mask {
                scores = scores.add(m);
            }
            let attn = scores.softmax_last();
            head_outs.push(attn.matmul(&vh));
        }
        let concat = Tensor::concat(1, &head_outs);
        let mut attn_out = self.wo.forward(&concat);
        if let Some(d) = deltas {
            if let Some(dout) = &d.o {
                attn_out = dout.apply(&concat, attn_out);
            }
        }
        let x = x.add(&attn_out);
        let xn2 = self.ln2.forward(&x);
        let mlp = self.ff2.forward(&self.ff1.forward(&xn2).gelu());
        x.add(&mlp)
    }

    pub fn collect(&self, ps: &mut ParamSet, prefix: &str) {
        self.ln1.collect(ps, &format!("{prefix}.ln1"));
        self.wq.collect(ps, &format!("{prefix}.wq"));
        self.wk.collect(ps, &format!("{prefix}.wk"));
        self.wv.collect(ps, &format!("{prefix}.wv"));
        self.wo.collect(ps, &format!("{prefix}.wo"));
        self.ln2.collect(ps, &format!("{prefix}.ln2"));
        self.ff1.collect(ps, &format!("{prefix}.ff1"));
        self.ff2.collect(ps, &format!("{prefix}.ff2"));
    }
}

fn causal_mask(s: usize) -> Tensor {
    let mut m = Array2::<f64>::zeros((s, s));
    for i in 0..s {
        for j in (i + 1)..s {
            m[[i, j]] = -1e30;
        }
    }
    Tensor::constant(m.into_dyn())
}

/// Sinusoidal embedding of a scalar in `[0, 1]`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = 1000f64.powf(i as f64 / half.max(1) as f64);
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
