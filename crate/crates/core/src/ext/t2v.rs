//! Text-to-voice timbre generation.
//!
//! Speaker conditions from the AR and flow-matching stages are concatenated,
//! compressed by PCA, and a small generator maps natural-language
//! descriptions plus discretized attribute tags onto the compressed space.
//! Inverse PCA then yields a condition-vector pair for synthesis.

use crate::speaker::{ConditionSource, SpeakerCondition};
use crate::{Error, Result};
use chorale_autograd::{rng, Adam, ParamSet, Tensor};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Discretized voice attributes. Bin 0 always means "unknown"; bins 1–5
/// carry increasing values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimbreAttributes {
    pub gender: Option<String>,
    pub language: Option<String>,
    pub speech_rate: u8,
    pub pitch: u8,
    pub volume: u8,
}

/// Raw acoustic measurements prior to discretization.
#[derive(Debug, Clone, Default)]
pub struct RawAttributes {
    pub pitch_hz: Option<f64>,
    pub rate_tokens_per_char: Option<f64>,
    pub rms: Option<f64>,
}

/// Bin boundaries persisted with the model: pitch bounds are fixed Hz
/// values, rate and volume use quintiles of the training corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimbreBinning {
    /// Left-closed upper bounds for pitch bins 1..=4; bin 5 is everything
    /// above the last bound.
    pub pitch_bounds_hz: Vec<f64>,
    pub rate_quintiles: Vec<f64>,
    pub volume_quintiles: Vec<f64>,
}

impl Default for TimbreBinning {
    fn default() -> Self {
        TimbreBinning {
            pitch_bounds_hz: vec![120.0, 160.0, 200.0, 260.0],
            rate_quintiles: vec![],
            volume_quintiles: vec![],
        }
    }
}

impl TimbreBinning {
    /// Fit rate/volume quintiles from corpus measurements.
    pub fn fit(rates: &[f64], volumes: &[f64]) -> Self {
        TimbreBinning {
            pitch_bounds_hz: vec![120.0, 160.0, 200.0, 260.0],
            rate_quintiles: quintiles(rates),
            volume_quintiles: quintiles(volumes),
        }
    }
}

fn quintiles(vals: &[f64]) -> Vec<f64> {
    if vals.is_empty() {
        return vec![];
    }
    let mut v = vals.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..5)
        .map(|i| v[(i * v.len() / 5).min(v.len() - 1)])
        .collect()
}

fn bin_by_bounds(value: f64, bounds: &[f64]) -> u8 {
    // Left-closed intervals: a value exactly on a bound falls upward.
    let mut bin = 1u8;
    for &b in bounds {
        if value >= b {
            bin += 1;
        }
    }
    bin
}

/// Map raw measurements to bins. Absent values become bin 0 ("unknown");
/// negative values are an error.
pub fn discretize_attributes(raw: &RawAttributes, binning: &TimbreBinning) -> Result<TimbreAttributes> {
    for (name, v) in [
        ("pitch_hz", raw.pitch_hz),
        ("rate_tokens_per_char", raw.rate_tokens_per_char),
        ("rms", raw.rms),
    ] {
        if let Some(v) = v {
            if v < 0.0 {
                return Err(Error::InvalidInput(format!("{name} must be non-negative, got {v}")));
            }
        }
    }
    Ok(TimbreAttributes {
        gender: None,
        language: None,
        speech_rate: raw
            .rate_tokens_per_char
            .map_or(0, |v| bin_by_bounds(v, &binning.rate_quintiles)),
        pitch: raw.pitch_hz.map_or(0, |v| bin_by_bounds(v, &binning.pitch_bounds_hz)),
        volume: raw.rms.map_or(0, |v| bin_by_bounds(v, &binning.volume_quintiles)),
    })
}

/// Mean + orthonormal basis from an eigendecomposition of the sample
/// covariance, components ordered by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: Array1<f64>,
    /// `[k, D]`, rows orthonormal.
    pub basis: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    pub requested_k: usize,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.basis.nrows()
    }

    /// True when the requested component count had to be reduced.
    pub fn was_reduced(&self) -> bool {
        self.k() < self.requested_k
    }

    pub fn project(&self, x: &Array1<f64>) -> Array1<f64> {
        self.basis.dot(&(x - &self.mean))
    }

    pub fn reconstruct(&self, p: &Array1<f64>) -> Array1<f64> {
        &self.mean + &self.basis.t().dot(p)
    }
}

/// Fit PCA and project the training vectors. `k` beyond `min(N-1, D)` is
/// silently reduced (visible via [`PcaBasis::was_reduced`]).
pub fn pca_fit_project(vectors: &Array2<f64>, k: usize) -> Result<(PcaBasis, Array2<f64>)> {
    let n = vectors.nrows();
    let d = vectors.ncols();
    if n < 2 {
        return Err(Error::InvalidInput("PCA needs at least 2 vectors".into()));
    }
    let k_eff = k.min(n - 1).min(d);
    let mean = vectors.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = vectors - &mean.clone().insert_axis(ndarray::Axis(0));
    // Sample covariance, eigendecomposed symmetrically.
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for r in 0..n {
                acc += centered[[r, i]] * centered[[r, j]];
            }
            let v = acc / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, eig.eigenvectors.column(i).into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    pairs.truncate(k_eff);
    let mut basis = Array2::<f64>::zeros((k_eff, d));
    let mut eigenvalues = Vec::with_capacity(k_eff);
    for (row, (l, mut v)) in pairs.into_iter().enumerate() {
        // Deterministic sign: largest-magnitude component positive.
        let (mut max_abs, mut max_val) = (0.0, 0.0);
        for &x in v.iter() {
            if x.abs() > max_abs {
                max_abs = x.abs();
                max_val = x;
            }
        }
        if max_val < 0.0 {
            v = -v;
        }
        for (col, &x) in v.iter().enumerate() {
            basis[[row, col]] = x;
        }
        eigenvalues.push(l);
    }
    let pca = PcaBasis {
        mean,
        basis,
        eigenvalues,
        requested_k: k,
    };
    let mut projections = Array2::<f64>::zeros((n, k_eff));
    for r in 0..n {
        let p = pca.project(&vectors.row(r).to_owned());
        projections.row_mut(r).assign(&p);
    }
    Ok((pca, projections))
}

const MASK_WORD: &str = "<mask>";

/// Compact generator from (description words, attribute bins) to the
/// PCA-compressed timbre space.
pub struct TimbreModel {
    pub pca: PcaBasis,
    pub binning: TimbreBinning,
    /// Split point of the reconstructed vector: first `ar_dim` entries are
    /// the AR-side condition, the rest the flow-matching side.
    pub ar_dim: usize,
    word_ids: BTreeMap<String, usize>,
    word_embed: Tensor, // [vocab, d_w]
    attr_embed: Tensor, // [3 * 6 bins, d_w]
    cat_embed: Tensor,  // hashed gender/language slots
    hid: crate::nn::Linear,
    out: crate::nn::Linear,
    d_w: usize,
}

impl TimbreModel {
    pub fn new(
        pca: PcaBasis,
        binning: TimbreBinning,
        ar_dim: usize,
        descriptions: &[String],
        seed: u64,
    ) -> Self {
        let mut r = rng::substream(seed, "t2v");
        let mut word_ids = BTreeMap::new();
        word_ids.insert(MASK_WORD.to_string(), 0);
        for d in descriptions {
            for w in tokenize_description(d) {
                let next = word_ids.len();
                word_ids.entry(w).or_insert(next);
            }
        }
        let d_w = 32;
        let k = pca.k();
        TimbreModel {
            word_embed: Tensor::param(rng::randn_scaled(&[word_ids.len(), d_w], 0.1, &mut r)),
            attr_embed: Tensor::param(rng::randn_scaled(&[18, d_w], 0.1, &mut r)),
            cat_embed: Tensor::param(rng::randn_scaled(&[32, d_w], 0.1, &mut r)),
            hid: crate::nn::Linear::new(3 * d_w, 64, &mut r),
            out: crate::nn::Linear::new(64, k, &mut r),
            pca,
            binning,
            ar_dim,
            word_ids,
            d_w,
        }
    }

    fn description_embedding(&self, words: &[String]) -> Tensor {
        let ids: Vec<usize> = words
            .iter()
            .map(|w| self.word_ids.get(w).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            return Tensor::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, self.d_w])));
        }
        let rows = self.word_embed.embedding(&ids);
        rows.sum_axis_op(0).scale(1.0 / ids.len() as f64).reshape(&[1, self.d_w])
    }

    fn attr_embedding(&self, attrs: &TimbreAttributes) -> Tensor {
        let ids = [
            attrs.speech_rate as usize,
            6 + attrs.pitch as usize,
            12 + attrs.volume as usize,
        ];
        let rows = self.attr_embed.embedding(&ids);
        let pooled = rows.sum_axis_op(0).scale(1.0 / 3.0);
        let cat_ids = [
            hash_slot(attrs.gender.as_deref().unwrap_or(""), 16),
            16 + hash_slot(attrs.language.as_deref().unwrap_or(""), 16),
        ];
        let cats = self.cat_embed.embedding(&cat_ids).sum_axis_op(0).scale(0.5);
        Tensor::concat(
            1,
            &[pooled.reshape(&[1, self.d_w]), cats.reshape(&[1, self.d_w])],
        )
    }

    /// Predicted projection `[k]` for a description + attributes, with
    /// optional word masking applied by the caller.
    pub fn predict(&self, words: &[String], attrs: &TimbreAttributes) -> Tensor {
        let x = Tensor::concat(1, &[self.description_embedding(words), self.attr_embedding(attrs)]);
        let k = self.pca.k();
        self.out.forward(&self.hid.forward(&x).relu()).reshape(&[k])
    }

    /// One MSE step; each description word is independently replaced by the
    /// mask token with probability `mask_prob`.
    pub fn train_step(
        &self,
        batch: &[(String, TimbreAttributes, Array1<f64>)],
        mask_prob: f64,
        opt: &mut Adam,
        r: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty t2v batch".into()));
        }
        let mut terms = Vec::new();
        for (desc, attrs, target) in batch {
            let words: Vec<String> = tokenize_description(desc)
                .into_iter()
                .map(|w| {
                    if mask_prob > 0.0 && r.gen_range(0.0..1.0) < mask_prob {
                        MASK_WORD.to_string()
                    } else {
                        w
                    }
                })
                .collect();
            let pred = self.predict(&words, attrs);
            terms.push(pred.mse(&Tensor::constant(target.clone().into_dyn())));
        }
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = acc.add(t);
        }
        let loss = acc.scale(1.0 / batch.len() as f64);
        let v = loss.value();
        loss.backward();
        opt.step(&self.params());
        Ok(v)
    }

    /// Full generation path: predict a projection, inverse-PCA it, split
    /// into the (AR, FM) condition pair, renormalize each side.
    pub fn generate(&self, description: &str, attrs: &TimbreAttributes) -> (SpeakerCondition, SpeakerCondition) {
        let words = tokenize_description(description);
        let proj = self.predict(&words, attrs);
        let p: Array1<f64> = proj.data().iter().copied().collect();
        let full = self.pca.reconstruct(&p);
        let (ar_v, fm_v) = full.view().split_at(ndarray::Axis(0), self.ar_dim);
        (
            make_condition(ar_v.to_owned()),
            make_condition(fm_v.to_owned()),
        )
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("word_embed", self.word_embed.clone());
        ps.push("attr_embed", self.attr_embed.clone());
        ps.push("cat_embed", self.cat_embed.clone());
        self.hid.collect(&mut ps, "hid");
        self.out.collect(&mut ps, "out");
        ps
    }
}

fn make_condition(mut v: Array1<f64>) -> SpeakerCondition {
    let norm = v.dot(&v).sqrt().max(1e-12);
    v.mapv_inplace(|x| x / norm);
    SpeakerCondition {
        vector: v,
        source: ConditionSource::T2vGenerated,
    }
}

pub fn tokenize_description(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

fn hash_slot(s: &str, slots: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    (h % slots as u64) as usize
}
