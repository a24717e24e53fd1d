//! Deterministic, speaker-disjoint dataset splits.
//!
//! Assignment is a pure function of `(speaker_id, seed)`: the speaker id is
//! hashed with the seed through SHA-256, mapped to `[0, 1)`, and binned by
//! the cumulative ratios. Every utterance of a speaker therefore lands in
//! the same split, and identical inputs always give identical splits.

use crate::data::manifest::ManifestEntry;
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;

/// Map `(speaker_id, seed)` to `[0, 1)`.
pub fn speaker_unit_hash(speaker_id: &str, seed: u64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(speaker_id.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let x = u64::from_le_bytes(digest[..8].try_into().unwrap());
    x as f64 / (u64::MAX as f64 + 1.0)
}

pub fn split_manifest(
    entries: &[ManifestEntry],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker_id.as_str()).collect();
    let non_empty = [a, b, c].iter().filter(|&&r| r > 0.0).count();
    if speakers.len() < non_empty {
        return Err(Error::InvalidInput(format!(
            "{} distinct speakers cannot fill {} non-empty splits",
            speakers.len(),
            non_empty
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for e in entries {
        let u = speaker_unit_hash(&e.speaker_id, seed);
        if u < a {
            train.push(e.clone());
        } else if u < a + b {
            val.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    Ok((train, val, test))
}
