//! Directory checkpoint: `manifest.json` plus a raw little-endian f32 blob
//! `weights.bin`, tensors row-major at 8-byte aligned offsets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig};
use crate::linalg::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";
const ALIGN: u64 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("invalid config in manifest: {0}")]
    InvalidConfig(String),
    #[error("tensor {name}: unsupported dtype {dtype:?}")]
    BadDtype { name: String, dtype: String },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name}: byte_len {byte_len} inconsistent with shape")]
    ByteLen { name: String, byte_len: u64 },
    #[error("tensor {name}: offset {offset} not {ALIGN}-byte aligned")]
    Misaligned { name: String, offset: u64 },
    #[error("tensors {first} and {second} overlap")]
    Overlap { first: String, second: String },
    #[error("truncated tensor {name}")]
    Truncated { name: String },
    #[error("missing tensor {name}")]
    Missing { name: String },
    #[error("unexpected tensor {name}")]
    Unexpected { name: String },
    #[error("duplicate tensor {name}")]
    Duplicate { name: String },
    #[error("tensor {name}: non-finite value")]
    NonFinite { name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Original index of each stored layer, in order.
    pub layer_indices: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Every tensor of `model` as (name, shape, values), in a fixed order.
fn tensors(model: &Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let mat = |m: &Matrix| (vec![m.rows(), m.cols()], m.data().to_vec());
    let (s, v) = mat(&model.tok_emb);
    out.push(("tok_emb".to_string(), s, v));
    let (s, v) = mat(&model.pos_emb);
    out.push(("pos_emb".to_string(), s, v));
    for (pos, layer) in model.layers.iter().enumerate() {
        let pre = format!("layers.{pos}");
        for (norm, ln) in [("ln1", &layer.ln1), ("ln2", &layer.ln2)] {
            out.push((format!("{pre}.{norm}.scale"), vec![ln.scale.len()], ln.scale.to_vec()));
            out.push((format!("{pre}.{norm}.shift"), vec![ln.shift.len()], ln.shift.to_vec()));
        }
        for d in &layer.denses {
            let k = d.kind.name();
            let (s, v) = mat(&d.weight);
            out.push((format!("{pre}.{k}.weight"), s, v));
            out.push((format!("{pre}.{k}.bias"), vec![d.bias.len()], d.bias.to_vec()));
            let mask = d.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            out.push((format!("{pre}.{k}.mask"), vec![d.mask.len()], mask));
            out.push((format!("{pre}.{k}.tuned_mask"), vec![d.tuned.len()], d.tuned.to_vec()));
        }
    }
    out.push(("ln_f.scale".to_string(), vec![model.ln_f.scale.len()], model.ln_f.scale.to_vec()));
    out.push(("ln_f.shift".to_string(), vec![model.ln_f.shift.len()], model.ln_f.shift.to_vec()));
    let (s, v) = mat(&model.lm_head);
    out.push(("lm_head.weight".to_string(), s, v));
    out.push(("lm_head.bias".to_string(), vec![model.lm_bias.len()], model.lm_bias.to_vec()));
    out
}

/// Serializes `model` to an in-memory (manifest, blob) pair.
pub fn encode(model: &Model) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, values) in tensors(model) {
        while blob.len() as u64 % ALIGN != 0 {
            blob.push(0);
        }
        let offset = blob.len() as u64;
        for v in &values {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape,
            dtype: DTYPE.to_string(),
            offset,
            byte_len: values.len() as u64 * 4,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        layer_indices: model.layers.iter().map(|l| l.index).collect(),
        tensors: entries,
    };
    (manifest, blob)
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (manifest, blob) = encode(model);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(io_err(&bpath))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model, CheckpointError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    decode(&manifest, &blob)
}

/// Validates the tensor directory against `blob` and rebuilds the model.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Model, CheckpointError> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Malformed(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.layer_indices.len() != manifest.config.n_layers {
        return Err(CheckpointError::Malformed(format!(
            "{} layer indices for n_layers {}",
            manifest.layer_indices.len(),
            manifest.config.n_layers
        )));
    }
    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for t in &manifest.tensors {
        if t.dtype != DTYPE {
            return Err(CheckpointError::BadDtype {
                name: t.name.clone(),
                dtype: t.dtype.clone(),
            });
        }
        let elems: usize = t.shape.iter().product();
        if elems as u64 * 4 != t.byte_len {
            return Err(CheckpointError::ByteLen {
                name: t.name.clone(),
                byte_len: t.byte_len,
            });
        }
        if t.offset % ALIGN != 0 {
            return Err(CheckpointError::Misaligned {
                name: t.name.clone(),
                offset: t.offset,
            });
        }
        if by_name.insert(&t.name, t).is_some() {
            return Err(CheckpointError::Duplicate { name: t.name.clone() });
        }
    }
    let mut ordered: Vec<&TensorEntry> = manifest.tensors.iter().collect();
    ordered.sort_by_key(|t| (t.offset, t.byte_len));
    for pair in ordered.windows(2) {
        if pair[0].offset + pair[0].byte_len > pair[1].offset && pair[1].byte_len > 0 {
            return Err(CheckpointError::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    for t in &ordered {
        if t.offset + t.byte_len > blob.len() as u64 {
            return Err(CheckpointError::Truncated { name: t.name.clone() });
        }
    }

    let mut model = Model::zeros(manifest.config.clone())
        .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    for (layer, &index) in model.layers.iter_mut().zip(&manifest.layer_indices) {
        layer.index = index;
    }
    let expected = tensors(&model);
    if let Some(extra) = manifest
        .tensors
        .iter()
        .find(|t| !expected.iter().any(|(n, ..)| *n == t.name))
    {
        return Err(CheckpointError::Unexpected { name: extra.name.clone() });
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, shape, _) in expected {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
        if entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: shape,
                found: entry.shape.clone(),
            });
        }
        let bytes = &blob[entry.offset as usize..(entry.offset + entry.byte_len) as usize];
        let v: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CheckpointError::NonFinite { name });
        }
        values.insert(name, v);
    }
    let mut take = |name: String, dst: &mut [f64]| {
        dst.copy_from_slice(&values.remove(&name).expect("validated above"));
    };
    take("tok_emb".into(), model.tok_emb.data_mut());
    take("pos_emb".into(), model.pos_emb.data_mut());
    for (pos, layer) in model.layers.iter_mut().enumerate() {
        let pre = format!("layers.{pos}");
        take(format!("{pre}.ln1.scale"), &mut layer.ln1.scale);
        take(format!("{pre}.ln1.shift"), &mut layer.ln1.shift);
        take(format!("{pre}.ln2.scale"), &mut layer.ln2.scale);
        take(format!("{pre}.ln2.shift"), &mut layer.ln2.shift);
        for d in &mut layer.denses {
            let k = d.kind.name();
            take(format!("{pre}.{k}.weight"), d.weight.data_mut());
            take(format!("{pre}.{k}.bias"), &mut d.bias);
            let mut mask = vec![0.0; d.in_dim()];
            take(format!("{pre}.{k}.mask"), &mut mask);
            let mut tuned = vec![0.0; d.in_dim()];
            take(format!("{pre}.{k}.tuned_mask"), &mut tuned);
            if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(CheckpointError::Malformed(format!("{pre}.{k}.mask is not binary")));
            }
            if mask.iter().zip(&tuned).any(|(&m, &t)| m == 0.0 && t != 0.0) {
                return Err(CheckpointError::Malformed(format!(
                    "{pre}.{k}.tuned_mask nonzero at a pruned position"
                )));
            }
            d.mask = mask.iter().map(|&m| m == 1.0).collect();
            d.tuned.0 = tuned;
        }
    }
    take("ln_f.scale".into(), &mut model.ln_f.scale);
    take("ln_f.shift".into(), &mut model.ln_f.shift);
    take("lm_head.weight".into(), model.lm_head.data_mut());
    take("lm_head.bias".into(), &mut model.lm_bias);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenseKind, FfnKind};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 6,
            vocab: 16,
            max_seq: 8,
            ffn_kind: FfnKind::Gated,
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::random(tiny(), 9).unwrap();
        m.layers[2]
            .dense_mut(DenseKind::UpProj)
            .set_masks(vec![true, false, true, true, true, true, true, true], crate::linalg::Vector(vec![1.5; 8]));
        m.remove_layer(1).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        let (man, blob) = encode(&m);
        assert!(man.tensors.iter().all(|t| t.offset % ALIGN == 0));
        let last = man.tensors.last().unwrap();
        assert_eq!(blob.len() as u64, last.offset + last.byte_len);
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let m = Model::random(tiny(), 1).unwrap();
        let (man, blob) = encode(&m);
        let err = decode(&man, &blob[..blob.len() - 4]).unwrap_err();
        assert_eq!(err.to_string(), "truncated tensor lm_head.bias");
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let m = Model::random(tiny(), 1).unwrap();
        let (mut man, blob) = encode(&m);
        man.tensors[1].offset = man.tensors[0].offset + 8;
        assert!(matches!(decode(&man, &blob), Err(CheckpointError::Overlap { .. })));
    }

    #[test]
    fn bad_entries_rejected() {
        let m = Model::random(tiny(), 1).unwrap();
        let (man, blob) = encode(&m);
        let mut bad = man.clone();
        bad.tensors[0].dtype = "f16".into();
        assert!(matches!(decode(&bad, &blob), Err(CheckpointError::BadDtype { .. })));
        let mut bad = man.clone();
        bad.tensors.pop();
        assert!(matches!(decode(&bad, &blob), Err(CheckpointError::Missing { .. })));
        let mut bad = man.clone();
        bad.tensors[2].offset += 4;
        assert!(matches!(decode(&bad, &blob), Err(CheckpointError::Misaligned { .. })));
        let mut bad = man;
        bad.config.n_heads = 3;
        assert!(decode(&bad, &blob).is_err());
    }
}
