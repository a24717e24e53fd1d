//! CTC loss via the forward-backward algorithm in log space.
//!
//! Blank index is 0. The loss node carries an analytic gradient
//! (`softmax - posterior`) so the dynamic program never has to be unrolled
//! onto the tape.

use crate::{Error, Result};
use chorale_autograd::Tensor;
use ndarray::{Array2, Ix2};
use std::collections::BTreeMap;

/// Character inventory for CTC supervision: id 0 is the blank, characters
/// are 1-based in sorted order. Built from the lowercased training texts.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVocab {
    chars: Vec<char>,
    map: BTreeMap<char, usize>,
}

impl CharVocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: std::collections::BTreeSet<char> = std::collections::BTreeSet::new();
        for t in texts {
            for c in t.to_lowercase().chars() {
                set.insert(c);
            }
        }
        let chars: Vec<char> = set.into_iter().collect();
        let map = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 1))
            .collect();
        CharVocab { chars, map }
    }

    /// Number of classes including the blank.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    /// Encode text to unit ids, skipping characters outside the inventory.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .chars()
            .filter_map(|c| self.map.get(&c).copied())
            .collect()
    }

    pub fn serialize(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn deserialize(s: &str) -> Self {
        let chars: Vec<char> = s.chars().collect();
        let map = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 1))
            .collect();
        CharVocab { chars, map }
    }
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Minimum number of frames needed to emit `targets` (length plus one frame
/// per consecutive repeat).
pub fn min_frames_for(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

/// CTC negative log-likelihood of `targets` under `logits` `[T, classes]`.
/// Target ids must be in `[1, classes)`.
pub fn ctc_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let x = logits
        .data()
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape("ctc logits must be 2-D".into()))?
        .to_owned();
    let t_len = x.nrows();
    let classes = x.ncols();
    if let Some(&bad) = targets.iter().find(|&&u| u == 0 || u >= classes) {
        return Err(Error::InvalidInput(format!(
            "ctc target id {bad} outside [1, {classes})"
        )));
    }
    if t_len < min_frames_for(targets) {
        return Err(Error::InvalidInput(format!(
            "ctc target of length {} (with repeats) cannot align to {} frames",
            targets.len(),
            t_len
        )));
    }

    // Log-softmax rows.
    let mut lp = x.clone();
    for mut row in lp.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.fold(0.0, |a, &b| a + (b - m).exp()).ln();
        row.mapv_inplace(|v| v - lse);
    }

    // Extended label sequence: blanks interleaved around targets.
    let s_len = 2 * targets.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { 0 } else { targets[s / 2] })
        .collect();
    let neg = f64::NEG_INFINITY;

    let mut alpha = Array2::<f64>::from_elem((t_len, s_len), neg);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = vec![alpha[[t - 1, s]]];
            if s >= 1 {
                terms.push(alpha[[t - 1, s - 1]]);
            }
            if s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2] {
                terms.push(alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = log_sum_exp(&terms) + lp[[t, ext[s]]];
        }
    }
    let mut final_terms = vec![alpha[[t_len - 1, s_len - 1]]];
    if s_len > 1 {
        final_terms.push(alpha[[t_len - 1, s_len - 2]]);
    }
    let log_z = log_sum_exp(&final_terms);
    let loss_val = -log_z;
    if !loss_val.is_finite() {
        return Err(Error::InvalidInput(
            "ctc loss is not finite (no feasible alignment)".into(),
        ));
    }

    // Backward variables (emissions at t+1..T-1).
    let mut beta = Array2::<f64>::from_elem((t_len, s_len), neg);
    beta[[t_len - 1, s_len - 1]] = 0.0;
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![lp[[t + 1, ext[s]]] + beta[[t + 1, s]]];
            if s + 1 < s_len {
                terms.push(lp[[t + 1, ext[s + 1]]] + beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && ext[s + 2] != 0 && ext[s + 2] != ext[s] {
                terms.push(lp[[t + 1, ext[s + 2]]] + beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = log_sum_exp(&terms);
        }
    }

    // Posterior over extended states, folded to classes:
    // dL/dlogit[t,c] = softmax[t,c] - sum_{s: ext[s]=c} gamma_t(s).
    let mut grad = lp.mapv(f64::exp);
    for t in 0..t_len {
        for s in 0..s_len {
            let g = alpha[[t, s]] + beta[[t, s]] - log_z;
            if g > -700.0 {
                grad[[t, ext[s]]] -= g.exp();
            }
        }
    }

    Ok(Tensor::from_op(
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), loss_val),
        vec![logits.clone()],
        Box::new(move |g_out, parents| {
            let s = *g_out.iter().next().unwrap();
            parents[0].accumulate_grad((&grad * s).into_dyn());
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Exhaustive oracle: sum softmax-path probabilities over every frame
    /// labeling whose collapse (drop repeats, then blanks) equals `target`.
    fn brute_force_ctc(logits: &Array2<f64>, target: &[usize]) -> f64 {
        let t_len = logits.nrows();
        let classes = logits.ncols();
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let mut total = 0.0;
        let paths = (classes as u64).pow(t_len as u32);
        for code in 0..paths {
            let mut rem = code;
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push((rem % classes as u64) as usize);
                rem /= classes as u64;
            }
            let collapsed: Vec<usize> = {
                let mut out = Vec::new();
                let mut prev = usize::MAX;
                for &c in &path {
                    if c != prev {
                        out.push(c);
                    }
                    prev = c;
                }
                out.into_iter().filter(|&c| c != 0).collect()
            };
            if collapsed == target {
                let mut p = 1.0;
                for (t, &c) in path.iter().enumerate() {
                    p *= probs[[t, c]];
                }
                total += p;
            }
        }
        -total.ln()
    }

    #[test]
    fn single_frame_uniform_two_classes() {
        let logits = Tensor::constant(Array2::zeros((1, 2)).into_dyn());
        let loss = ctc_loss(&logits, &[1]).unwrap();
        assert!((loss.value() - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((loss.value() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blanks() {
        let mut l = Array2::zeros((2, 3));
        l[[0, 0]] = 1.0;
        l[[1, 1]] = 0.5;
        let logits = Tensor::constant(l.clone().into_dyn());
        let loss = ctc_loss(&logits, &[]).unwrap();
        // -log(P(blank at t=0) * P(blank at t=1))
        let lp = |row: usize| {
            let r = l.row(row);
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            l[[row, 0]] - lse
        };
        let expect = -(lp(0) + lp(1));
        assert!((loss.value() - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_instances() {
        use rand::Rng;
        let mut r = chorale_autograd::rng::seeded(11);
        for _ in 0..200 {
            let t_len = r.gen_range(1..=4usize);
            let classes = r.gen_range(2..=3usize);
            let tgt_len = r.gen_range(0..=2usize.min(t_len));
            let target: Vec<usize> = (0..tgt_len).map(|_| r.gen_range(1..classes)).collect();
            if t_len < min_frames_for(&target) {
                continue;
            }
            let l = Array2::from_shape_fn((t_len, classes), |_| r.gen_range(-2.0..2.0));
            let loss = ctc_loss(&Tensor::constant(l.clone().into_dyn()), &target).unwrap();
            let oracle = brute_force_ctc(&l, &target);
            assert!(
                (loss.value() - oracle).abs() < 1e-6,
                "dp {} vs oracle {oracle}",
                loss.value()
            );
        }
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let logits = Tensor::constant(Array2::zeros((2, 3)).into_dyn());
        assert!(ctc_loss(&logits, &[1, 1]).is_err()); // needs 3 frames
        assert!(ctc_loss(&logits, &[1, 2, 1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = chorale_autograd::rng::seeded(12);
        let l = chorale_autograd::rng::randn(&[4, 3], &mut r);
        let logits = Tensor::param(l);
        let target = vec![1, 2];
        let loss = ctc_loss(&logits, &target).unwrap();
        loss.backward();
        let g = logits.grad().unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let orig = *logits.data().iter().nth(i).unwrap();
            *logits.data_mut().iter_mut().nth(i).unwrap() = orig + h;
            let fp = ctc_loss(&logits, &target).unwrap().value();
            *logits.data_mut().iter_mut().nth(i).unwrap() = orig - h;
            let fm = ctc_loss(&logits, &target).unwrap().value();
            *logits.data_mut().iter_mut().nth(i).unwrap() = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = *g.iter().nth(i).unwrap();
            assert!((num - ana).abs() < 1e-5, "grad {ana} vs fd {num}");
        }
    }

    #[test]
    fn vocab_roundtrip_and_blank_reservation() {
        let v = CharVocab::build(["Hello", "world"]);
        assert!(v.num_classes() > 1);
        let units = v.encode("hello");
        assert!(units.iter().all(|&u| u >= 1 && u < v.num_classes()));
        let v2 = CharVocab::deserialize(&v.serialize());
        assert_eq!(v, v2);
    }
}
