// SPDX-License-Identifier: MIT OR Apache-2.0

//! Directory checkpoints: `manifest.json` plus `weights.bin` holding every
//! tensor as little-endian `f32`, in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::autodiff::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::harness::io::{read_json, write_atomic, write_json};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    /// Moments stored after the parameters, as `first.<name>` and
    /// `second.<name>`.
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerEntry>,
}

fn push(buf: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, shape: Vec<usize>, data: &[f64]) {
    entries.push(TensorEntry {
        name,
        shape,
        dtype: "f32".into(),
        byte_offset: buf.len(),
    });
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Writes `dir/manifest.json` and `dir/weights.bin`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, optimizer: Option<&AdamState>) -> Result<()> {
    params.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in &params.tensors {
        push(&mut buf, &mut tensors, name.clone(), t.shape().to_vec(), t.data());
    }
    let optimizer = optimizer.map(|st| {
        let mut entries = Vec::new();
        for (kind, moments) in [("first", &st.first), ("second", &st.second)] {
            for (name, m) in moments {
                push(&mut buf, &mut entries, format!("{kind}.{name}"), vec![m.len()], m);
            }
        }
        OptimizerEntry {
            step: st.step,
            tensors: entries,
        }
    });
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        tensors,
        optimizer,
    };
    write_atomic(&dir.join("weights.bin"), &buf)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

fn read_entry(bytes: &[u8], e: &TensorEntry, expected_offset: usize) -> Result<Tensor> {
    if e.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "`{}`: unsupported dtype {}",
            e.name, e.dtype
        )));
    }
    if e.byte_offset != expected_offset {
        return Err(Error::Checkpoint(format!(
            "`{}`: offset {} breaks contiguous layout (expected {expected_offset})",
            e.name, e.byte_offset
        )));
    }
    let n: usize = e.shape.iter().product();
    let end = e.byte_offset + 4 * n;
    if end > bytes.len() {
        return Err(Error::Checkpoint(format!("`{}` runs past end of weights.bin", e.name)));
    }
    let data = bytes[e.byte_offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(format!("`{}`: {err}", e.name)))
}

/// Reads a checkpoint and checks it against the embedded config.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, Option<AdamState>)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format_version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let path = dir.join("weights.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut offset = 0;
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let t = read_entry(&bytes, e, offset)?;
        offset += 4 * t.len();
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
    }
    let params = ModelParams {
        config: manifest.config.clone(),
        tensors,
    };
    params.validate()?;
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut st = AdamState {
                step: o.step,
                ..AdamState::default()
            };
            for e in &o.tensors {
                let t = read_entry(&bytes, e, offset)?;
                offset += 4 * t.len();
                let (kind, name) = e
                    .name
                    .split_once('.')
                    .ok_or_else(|| Error::Checkpoint(format!("bad moment name `{}`", e.name)))?;
                let slot = match kind {
                    "first" => &mut st.first,
                    "second" => &mut st.second,
                    _ => return Err(Error::Checkpoint(format!("bad moment name `{}`", e.name))),
                };
                slot.insert(name.to_string(), t.into_data());
            }
            Some(st)
        }
    };
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "weights.bin has {} bytes, manifest accounts for {offset}",
            bytes.len()
        )));
    }
    Ok((params, optimizer))
}
