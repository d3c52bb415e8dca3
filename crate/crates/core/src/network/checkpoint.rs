use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::variant::Variant;

pub const MODEL_JSON: &str = "model.json";
pub const MODEL_F32: &str = "model.f32";
const CHECKPOINT_VERSION: u64 = 1;

/// Entry of the checkpoint manifest; `byte_offset` points into `model.f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u64,
    pub variant: Variant,
    pub config: ModelConfig,
    pub value_scale: f64,
    pub parameters: Vec<TensorRecord>,
    pub running_stats: Vec<TensorRecord>,
    pub total_bytes: usize,
}

/// Writes `model.json` and `model.f32` into `dir` (created if needed).
pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_params = model.params().len();
    let rec = |entries: &[super::ParamEntry], base: usize| {
        entries
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                byte_offset: 4 * (base + e.offset),
            })
            .collect()
    };
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        variant: model.variant(),
        config: model.config().clone(),
        value_scale: model.value_scale(),
        parameters: rec(model.param_manifest(), 0),
        running_stats: rec(model.stat_manifest(), n_params),
        total_bytes: 4 * (n_params + model.running_stats().len()),
    };
    let mut bytes = Vec::with_capacity(manifest.total_bytes);
    for v in model.params().iter().chain(model.running_stats()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MODEL_JSON), json)?;
    fs::write(dir.join(MODEL_F32), bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let json_path = dir.join(MODEL_JSON);
    let data_path = dir.join(MODEL_F32);
    for p in [&json_path, &data_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&json_path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    let bytes = fs::read(&data_path)?;
    if bytes.len() != manifest.total_bytes || bytes.len() % 4 != 0 {
        return Err(Error::SizeMismatch {
            path: data_path,
            expected: manifest.total_bytes as u64,
            found: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let n_params: usize = manifest
        .parameters
        .iter()
        .map(|r| r.shape.iter().product::<usize>())
        .sum();
    if n_params > values.len() {
        return Err(Error::contract("checkpoint manifest larger than data"));
    }
    let (p, s) = values.split_at(n_params);
    let mut model = Model::from_parts(manifest.config, manifest.variant, p.to_vec(), s.to_vec())?;
    let names_match = model
        .param_manifest()
        .iter()
        .zip(&manifest.parameters)
        .all(|(a, b)| a.name == b.name && a.shape == b.shape && 4 * a.offset == b.byte_offset);
    if !names_match {
        return Err(Error::contract(
            "checkpoint parameter manifest does not match its config",
        ));
    }
    model.set_value_scale(manifest.value_scale)?;
    Ok(model)
}
