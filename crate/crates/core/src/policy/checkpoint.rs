//! Binary checkpoint: magic line, a TOML header (config, trainer state, tensor
//! manifest), then little-endian `f32` data in manifest order.
//!
//! ```text
//! FRLCKPT1\n
//! <header byte length>\n
//! <header>
//! <data>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Policy, TransformerPolicy};
use crate::error::{Error, Result};
use crate::params::{OptimizerState, ParameterStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "FRLCKPT1";

const MOMENT1: &str = "opt.m/";
const MOMENT2: &str = "opt.v/";
const REFERENCE: &str = "ref/";

/// Trainer bookkeeping needed to resume a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    /// Number of completed training steps.
    pub step: u64,
    pub beta_kl: f64,
    pub optimizer_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    trainer: TrainerState,
    tensor: Vec<ManifestEntry>,
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub policy: TransformerPolicy<f32>,
    pub reference: Option<TransformerPolicy<f32>>,
    pub trainer: TrainerState,
}

pub fn save_checkpoint(
    path: &Path,
    policy: &TransformerPolicy<f32>,
    reference: Option<&TransformerPolicy<f32>>,
    trainer: &TrainerState,
) -> Result<()> {
    let store = policy.params();
    let opt = store.optimizer_state();
    let mut entries: Vec<(String, &[usize], &[f32])> = Vec::new();
    for (name, t) in store.iter() {
        entries.push((name.to_string(), t.shape(), t.values()));
    }
    for (i, (name, t)) in store.iter().enumerate() {
        entries.push((format!("{MOMENT1}{name}"), t.shape(), &opt.first_moment[i]));
        entries.push((format!("{MOMENT2}{name}"), t.shape(), &opt.second_moment[i]));
    }
    if let Some(r) = reference {
        for (name, t) in r.params().iter() {
            entries.push((format!("{REFERENCE}{name}"), t.shape(), t.values()));
        }
    }

    let mut offset = 0u64;
    let mut manifest = Vec::with_capacity(entries.len());
    for (name, shape, values) in &entries {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: shape.to_vec(),
            offset,
        });
        offset += 4 * values.len() as u64;
    }
    let mut trainer = trainer.clone();
    trainer.optimizer_step = opt.step;
    let header = Header {
        model: policy.config().clone(),
        trainer,
        tensor: manifest,
    };
    let text = toml::to_string(&header).map_err(|e| Error::config(e.to_string()))?;

    let mut buf = Vec::with_capacity(offset as usize + text.len() + 32);
    writeln!(buf, "{CHECKPOINT_MAGIC}")?;
    writeln!(buf, "{}", text.len())?;
    buf.extend_from_slice(text.as_bytes());
    for (_, _, values) in &entries {
        for v in values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_line<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad(path, "truncated header"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| bad(path, "header is not UTF-8"))?;
    Ok((line, &bytes[end + 1..]))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (magic, rest) = read_line(&bytes, path)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(path, format!("bad magic `{magic}`")));
    }
    let (len, rest) = read_line(rest, path)?;
    let len: usize = len.parse().map_err(|_| bad(path, "bad header length"))?;
    if rest.len() < len {
        return Err(bad(path, "truncated header"));
    }
    let text = std::str::from_utf8(&rest[..len]).map_err(|_| bad(path, "header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(path, e.to_string()))?;
    let data = &rest[len..];

    let mut expected_offset = 0u64;
    for e in &header.tensor {
        if e.offset != expected_offset {
            return Err(bad(
                path,
                format!(
                    "tensor `{}` at offset {} (expected {expected_offset})",
                    e.name, e.offset
                ),
            ));
        }
        expected_offset += 4 * e.shape.iter().product::<usize>() as u64;
    }
    if expected_offset != data.len() as u64 {
        return Err(bad(
            path,
            format!(
                "manifest describes {expected_offset} data bytes but file holds {}",
                data.len()
            ),
        ));
    }

    let read = |e: &ManifestEntry| -> Vec<f32> {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        data[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };

    let mut policy = TransformerPolicy::<f32>::new(header.model.clone())?;
    let names: Vec<String> = policy.params().iter().map(|(n, _)| n.to_string()).collect();
    let find = |name: &str| header.tensor.iter().find(|e| e.name == name);

    let mut store = ParameterStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for name in &names {
        let e = find(name).ok_or_else(|| bad(path, format!("missing tensor `{name}`")))?;
        store.add(name.clone(), Tensor::new(e.shape.clone(), read(e))?)?;
        let m1 = find(&format!("{MOMENT1}{name}"));
        let m2 = find(&format!("{MOMENT2}{name}"));
        let n: usize = e.shape.iter().product();
        first.push(m1.map_or_else(|| vec![0.0; n], read));
        second.push(m2.map_or_else(|| vec![0.0; n], read));
    }
    store.set_optimizer_state(OptimizerState {
        first_moment: first,
        second_moment: second,
        step: header.trainer.optimizer_step,
    })?;
    policy
        .load_params(store)
        .map_err(|e| bad(path, e.to_string()))?;

    let reference = if header.tensor.iter().any(|e| e.name.starts_with(REFERENCE)) {
        let mut r = TransformerPolicy::<f32>::new(header.model.clone())?;
        let mut store = ParameterStore::new();
        for name in &names {
            let e = find(&format!("{REFERENCE}{name}"))
                .ok_or_else(|| bad(path, format!("missing reference tensor `{name}`")))?;
            store.add(name.clone(), Tensor::new(e.shape.clone(), read(e))?)?;
        }
        r.load_params(store).map_err(|e| bad(path, e.to_string()))?;
        Some(r)
    } else {
        None
    };

    Ok(Checkpoint {
        policy,
        reference,
        trainer: header.trainer,
    })
}
