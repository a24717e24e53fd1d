//! Word error rate and cosine similarity.
//!
//! Normalization is fixed and locale-independent: lowercase, strip
//! punctuation (any non-alphanumeric becomes a separator), split on
//! whitespace. For `lang = "zh"` the units are individual characters
//! instead of whitespace words.

use crate::{Error, Result};

/// Normalized token stream for WER.
pub fn normalize_text(s: &str, lang: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    if lang == "zh" {
        return lowered
            .chars()
            .filter(|c| c.is_alphanumeric())
            .map(|c| c.to_string())
            .collect();
    }
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Word-level Levenshtein distance (unit costs) over `max(1, |ref|)`.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    wer_units(
        &normalize_text(reference, "en"),
        &normalize_text(hypothesis, "en"),
    )
}

pub fn wer_lang(reference: &str, hypothesis: &str, lang: &str) -> f64 {
    wer_units(
        &normalize_text(reference, lang),
        &normalize_text(hypothesis, lang),
    )
}

pub fn wer_units(reference: &[String], hypothesis: &[String]) -> f64 {
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m] as f64 / n.max(1) as f64
}

/// `a . b / (||a|| ||b||)`, in `[-1, 1]`. Zero vectors are an error.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine between vectors of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_strings_score_zero() {
        assert_eq!(wer("the cat sat", "The cat sat!"), 0.0);
    }

    #[test]
    fn one_substitution_in_three() {
        assert!((wer("a b c", "a x c") - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_uses_unit_denominator() {
        assert_eq!(wer("", "hello there"), 2.0);
        assert_eq!(wer("", ""), 0.0);
    }

    #[test]
    fn chinese_uses_character_units() {
        let w = wer_lang("你好世界", "你好地球", "zh");
        assert!((w - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_idempotent() {
        for s in ["Hello, World!", "a  b\tc", "MIXED case-words", ""] {
            let once = normalize_text(s, "en");
            let twice = normalize_text(&once.join(" "), "en");
            assert_eq!(once, twice);
        }
    }

    /// Independent oracle: plain recursive edit distance with memoization.
    fn edit_distance_recursive(a: &[String], b: &[String]) -> usize {
        fn go(
            a: &[String],
            b: &[String],
            i: usize,
            j: usize,
            memo: &mut std::collections::HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i] == b[j] {
                go(a, b, i + 1, j + 1, memo)
            } else {
                1 + go(a, b, i + 1, j, memo)
                    .min(go(a, b, i, j + 1, memo))
                    .min(go(a, b, i + 1, j + 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(a, b, 0, 0, &mut std::collections::HashMap::new())
    }

    #[test]
    fn matches_recursive_oracle_on_random_pairs() {
        use rand::Rng;
        let mut r = chorale_autograd::rng::seeded(21);
        let words = ["a", "bb", "ccc", "dd", "e", "ff"];
        for _ in 0..500 {
            let mk = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
                let n = r.gen_range(0..=8usize);
                (0..n).map(|_| words[r.gen_range(0..words.len())].to_string()).collect()
            };
            let a = mk(&mut r);
            let b = mk(&mut r);
            let got = wer_units(&a, &b);
            let expect = edit_distance_recursive(&a, &b) as f64 / a.len().max(1) as f64;
            assert!((got - expect).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn cosine_hand_cases() {
        assert!((cosine_sim(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let v = cosine_sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        let expect = 32.0 / ((14.0f64).sqrt() * (77.0f64).sqrt());
        assert!((v - expect).abs() < 1e-9);
        assert!((v - 0.97463).abs() < 1e-5);
    }

    #[test]
    fn zero_vector_is_an_error() {
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_invariant_to_positive_scaling() {
        use rand::Rng;
        let mut r = chorale_autograd::rng::seeded(22);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            if a.iter().all(|&x| x == 0.0) || b.iter().all(|&x| x == 0.0) {
                continue;
            }
            let s1 = cosine_sim(&a, &b).unwrap();
            let a2: Vec<f64> = a.iter().map(|x| x * 17.0).collect();
            let b2: Vec<f64> = b.iter().map(|x| x * 0.003).collect();
            let s2 = cosine_sim(&a2, &b2).unwrap();
            assert!((s1 - s2).abs() < 1e-9);
        }
    }
}
