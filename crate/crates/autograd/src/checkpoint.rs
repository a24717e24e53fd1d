//! Checkpoint I/O.
//!
//! A checkpoint is a directory holding `meta.json` (format version, array
//! shapes, and an arbitrary JSON config blob) plus one raw little-endian
//! `f32` binary per named array under `arrays/`. Array names map to file
//! names with `/`-unsafe characters replaced.
//!
//! Trainer snapshots (for exact resume) are a separate, lossless `f64`
//! container written next to the checkpoint; they are internal state, not
//! part of the checkpoint interface.

use crate::tensor::ParamSet;
use crate::{AutogradError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    arrays: BTreeMap<String, Vec<usize>>,
    config: serde_json::Value,
}

fn file_name_for(array_name: &str) -> String {
    let safe: String = array_name
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    format!("{safe}.f32")
}

/// Write `params` (as f32) and a config blob under `dir`.
pub fn save(dir: &Path, params: &ParamSet, config: &serde_json::Value) -> Result<()> {
    let arrays_dir = dir.join("arrays");
    fs::create_dir_all(&arrays_dir)?;
    let mut shapes = BTreeMap::new();
    for (name, t) in params.iter() {
        let data = t.data();
        shapes.insert(name.to_string(), data.shape().to_vec());
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &v in data.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(arrays_dir.join(file_name_for(name)), bytes)?;
    }
    let meta = Meta {
        format_version: FORMAT_VERSION,
        arrays: shapes,
        config: config.clone(),
    };
    let mut f = fs::File::create(dir.join("meta.json"))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

/// Read every named array (widened to f64) and the config blob.
pub fn load(dir: &Path) -> Result<(BTreeMap<String, ArrayD<f64>>, serde_json::Value)> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| {
        AutogradError::Checkpoint(format!("cannot read {}: {e}", meta_path.display()))
    })?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(AutogradError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            meta.format_version
        )));
    }
    let mut arrays = BTreeMap::new();
    for (name, shape) in &meta.arrays {
        let path = dir.join("arrays").join(file_name_for(name));
        let bytes = fs::read(&path).map_err(|e| {
            AutogradError::Checkpoint(format!("cannot read array {}: {e}", path.display()))
        })?;
        let n: usize = shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(AutogradError::Checkpoint(format!(
                "array {name}: expected {} bytes, found {}",
                n * 4,
                bytes.len()
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            vals.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        arrays.insert(
            name.clone(),
            ArrayD::from_shape_vec(IxDyn(shape), vals).map_err(|e| {
                AutogradError::Checkpoint(format!("array {name}: bad shape: {e}"))
            })?,
        );
    }
    Ok((arrays, meta.config))
}

/// Copy loaded values into an already-constructed parameter set, verifying
/// that names and shapes line up exactly.
pub fn restore_params(params: &ParamSet, arrays: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    for (name, t) in params.iter() {
        let arr = arrays.get(name).ok_or_else(|| {
            AutogradError::Checkpoint(format!("checkpoint missing array {name}"))
        })?;
        if arr.shape() != t.data().shape() {
            return Err(AutogradError::Checkpoint(format!(
                "array {name}: shape {:?} does not match model {:?}",
                arr.shape(),
                t.data().shape()
            )));
        }
        t.data_mut().assign(arr);
    }
    Ok(())
}

/// SHA-256 style fingerprint is overkill here; this 64-bit FNV-1a over the
/// serialized f32 bytes is enough to detect any mutation of a frozen model.
pub fn fingerprint(params: &ParamSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in params.iter() {
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        for &v in t.data().iter() {
            for b in (v as f32).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h
}

/// Lossless f64 container for trainer snapshots (model + optimizer moments
/// + bookkeeping). Single file, simple length-prefixed records.
pub fn save_state_file(path: &Path, arrays: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&(arrays.len() as u64).to_le_bytes())?;
    for (name, arr) in arrays {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u32).to_le_bytes())?;
        f.write_all(nb)?;
        let shape = arr.shape();
        f.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in arr.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_state_file(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut f = fs::File::open(path)?;
    let mut buf8 = [0u8; 8];
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        f.read_exact(&mut buf4)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| AutogradError::Checkpoint(format!("bad state name: {e}")))?;
        f.read_exact(&mut buf4)?;
        let ndim = u32::from_le_bytes(buf4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            f.read_exact(&mut buf8)?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut buf8)?;
            vals.push(f64::from_le_bytes(buf8));
        }
        out.insert(
            name.clone(),
            ArrayD::from_shape_vec(IxDyn(&shape), vals).map_err(|e| {
                AutogradError::Checkpoint(format!("state array {name}: bad shape: {e}"))
            })?,
        );
    }
    Ok(out)
}
