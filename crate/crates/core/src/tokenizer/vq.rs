//! Vector quantization with EMA codebook updates and a straight-through
//! gradient estimator.

use crate::{Error, Result};
use chorale_autograd::Tensor;
use ndarray::{Array1, Array2, Ix2};

/// EMA-maintained codebook. The codes never receive gradients; they track
/// `ema_sums / max(ema_counts, eps)` after every training-mode update.
pub struct Codebook {
    pub codes: Tensor,      // [K, d]
    pub ema_counts: Tensor, // [K]
    pub ema_sums: Tensor,   // [K, d]
    /// Training step at which each code was last assigned (dead-code
    /// reseeding bookkeeping; not persisted).
    pub last_used: Vec<u64>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, r: &mut rand_chacha::ChaCha8Rng) -> Self {
        let codes = chorale_autograd::rng::randn_scaled(&[k, d], 0.5, r);
        // Seed EMA state as if each code had unit weight, so the invariant
        // codes = sums / counts holds from step zero.
        let sums = codes.clone();
        Codebook {
            codes: Tensor::param(codes),
            ema_counts: Tensor::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[k]), 1.0)),
            ema_sums: Tensor::param(sums),
            last_used: vec![0; k],
        }
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }
}

pub struct VqOutput {
    pub tokens: Vec<usize>,
    /// Quantized features with a straight-through gradient path back to the
    /// input features.
    pub quantized: Tensor,
    /// `mean_t ||f_t - stopgrad(q_t)||^2`
    pub commit_loss: Tensor,
}

/// Nearest-code assignment (ties break to the lowest index), straight-through
/// quantization, and commitment loss. When `ema_decay` is set, the codebook
/// is updated from the batch assignments.
pub fn vq_quantize(
    features: &Tensor,
    codebook: &mut Codebook,
    ema_decay: Option<f64>,
    ema_eps: f64,
    step: u64,
) -> Result<VqOutput> {
    let f = features
        .data()
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape("vq features must be 2-D".into()))?
        .to_owned();
    if f.ncols() != codebook.dim() {
        return Err(Error::Shape(format!(
            "feature dim {} does not match code dim {}",
            f.ncols(),
            codebook.dim()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("vq features must be finite".into()));
    }
    let codes = codebook
        .codes
        .data()
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let t = f.nrows();
    let k = codes.nrows();
    let mut tokens = Vec::with_capacity(t);
    let mut qvals = Array2::<f64>::zeros((t, f.ncols()));
    for i in 0..t {
        let row = f.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let mut d = 0.0;
            for (a, b) in row.iter().zip(codes.row(c).iter()) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        tokens.push(best);
        qvals.row_mut(i).assign(&codes.row(best));
    }

    let q_const = Tensor::constant(qvals.clone().into_dyn());
    // Straight-through: value is q, gradient w.r.t. features is identity.
    let quantized = features.add(&q_const.sub(features).detach());
    let commit_loss = features.sub(&q_const).square().sum_axis_op(1).mean();

    if let Some(decay) = ema_decay {
        let mut counts_n = Array1::<f64>::zeros(k);
        let mut sums_n = Array2::<f64>::zeros((k, f.ncols()));
        for (i, &tok) in tokens.iter().enumerate() {
            counts_n[tok] += 1.0;
            let mut row = sums_n.row_mut(tok);
            row += &f.row(i);
            codebook.last_used[tok] = step;
        }
        {
            let mut counts = codebook.ema_counts.data_mut();
            for (c, &n) in counts.iter_mut().zip(counts_n.iter()) {
                *c = decay * *c + (1.0 - decay) * n;
            }
        }
        {
            let sums_n = sums_n.into_dyn();
            codebook
                .ema_sums
                .data_mut()
                .zip_mut_with(&sums_n, |v, &n| *v = decay * *v + (1.0 - decay) * n);
        }
        let counts = codebook.ema_counts.data().clone();
        let sums = codebook.ema_sums.data().clone();
        let mut codes_mut = codebook.codes.data_mut();
        let d = f.ncols();
        for c in 0..k {
            let denom = counts[[c]].max(ema_eps);
            for j in 0..d {
                codes_mut[[c, j]] = sums[[c, j]] / denom;
            }
        }
    }

    Ok(VqOutput {
        tokens,
        quantized,
        commit_loss,
    })
}

/// Re-seed codes unused for `dead_steps` from random rows of `features`.
pub fn reseed_dead_codes(
    codebook: &mut Codebook,
    features: &Array2<f64>,
    step: u64,
    dead_steps: u64,
    r: &mut rand_chacha::ChaCha8Rng,
) -> usize {
    use rand::Rng;
    let k = codebook.size();
    let mut reseeded = 0;
    for c in 0..k {
        if step.saturating_sub(codebook.last_used[c]) >= dead_steps {
            let row = r.gen_range(0..features.nrows());
            let src = features.row(row);
            {
                let mut codes = codebook.codes.data_mut();
                for (j, &v) in src.iter().enumerate() {
                    codes[[c, j]] = v;
                }
            }
            {
                let mut sums = codebook.ema_sums.data_mut();
                for (j, &v) in src.iter().enumerate() {
                    sums[[c, j]] = v;
                }
            }
            codebook.ema_counts.data_mut()[[c]] = 1.0;
            codebook.last_used[c] = step;
            reseeded += 1;
        }
    }
    reseeded
}

#[cfg(test)]
mod tests {
    use super::*;
    use chorale_autograd::rng;
    use ndarray::array;

    fn tiny_codebook(codes: Array2<f64>) -> Codebook {
        let r = &mut rng::seeded(0);
        let k = codes.nrows();
        let d = codes.ncols();
        let cb = Codebook::new(k, d, r);
        *cb.codes.data_mut() = codes.clone().into_dyn();
        *cb.ema_sums.data_mut() = codes.into_dyn();
        cb
    }

    #[test]
    fn exact_match_selects_code_with_zero_commit() {
        let mut r = rng::seeded(1);
        let mut cb = Codebook::new(8, 4, &mut r);
        let row5: Vec<f64> = cb.codes.data().index_axis(ndarray::Axis(0), 5).iter().copied().collect();
        let features = Tensor::constant(
            ndarray::Array2::from_shape_vec((1, 4), row5).unwrap().into_dyn(),
        );
        let out = vq_quantize(&features, &mut cb, None, 1e-5, 0).unwrap();
        assert_eq!(out.tokens, vec![5]);
        assert!(out.commit_loss.value() < 1e-20);
    }

    #[test]
    fn toy_2d_nearest_neighbor() {
        let mut cb = tiny_codebook(array![[0.0, 0.0], [1.0, 1.0]]);
        let features = Tensor::constant(array![[0.9, 0.8]].into_dyn());
        let out = vq_quantize(&features, &mut cb, None, 1e-5, 0).unwrap();
        assert_eq!(out.tokens, vec![1]);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let mut cb = tiny_codebook(array![[1.0, 0.0], [-1.0, 0.0]]);
        let features = Tensor::constant(array![[0.0, 0.0]].into_dyn());
        let out = vq_quantize(&features, &mut cb, None, 1e-5, 0).unwrap();
        assert_eq!(out.tokens, vec![0]);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let mut cb = tiny_codebook(array![[0.0, 0.0], [1.0, 1.0]]);
        let features = Tensor::constant(array![[0.9, 0.8, 0.7]].into_dyn());
        assert!(vq_quantize(&features, &mut cb, None, 1e-5, 0).is_err());
    }

    #[test]
    fn ema_update_keeps_codes_equal_to_ratio() {
        let mut r = rng::seeded(2);
        let mut cb = Codebook::new(4, 3, &mut r);
        for step in 0..5 {
            let features = Tensor::constant(rng::randn(&[10, 3], &mut r));
            vq_quantize(&features, &mut cb, Some(0.99), 1e-5, step).unwrap();
            let codes = cb.codes.data();
            let sums = cb.ema_sums.data();
            let counts = cb.ema_counts.data();
            for c in 0..4 {
                for j in 0..3 {
                    let expect = sums[[c, j]] / counts[[c]].max(1e-5);
                    assert!((codes[[c, j]] - expect).abs() < 1e-12);
                    assert!(codes[[c, j]].is_finite());
                }
                assert!(counts[[c]] >= 0.0);
            }
        }
    }

    #[test]
    fn quantized_value_matches_selected_codes() {
        let mut cb = tiny_codebook(array![[0.0, 0.0], [1.0, 1.0]]);
        let features = Tensor::constant(array![[0.9, 0.8], [0.1, -0.2]].into_dyn());
        let out = vq_quantize(&features, &mut cb, None, 1e-5, 0).unwrap();
        let q = out.quantized.data();
        assert_eq!(q[[0, 0]], 1.0);
        assert_eq!(q[[1, 0]], 0.0);
    }

    #[test]
    fn dead_codes_reseed_from_batch() {
        let mut r = rng::seeded(3);
        let mut cb = Codebook::new(4, 2, &mut r);
        cb.last_used = vec![0, 100, 100, 100];
        let feats = ndarray::Array2::from_elem((5, 2), 7.5);
        let n = reseed_dead_codes(&mut cb, &feats, 300, 200, &mut r);
        assert_eq!(n, 4);
        assert_eq!(cb.codes.data()[[0, 0]], 7.5);
    }
}
