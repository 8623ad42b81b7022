//! Checkpoint directories: `manifest.json` plus one blob per tensor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SecoModel};
use crate::nn::{Arch, Module};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden: usize,
    pub slots: usize,
    pub seed: u64,
    pub step: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(model: &SecoModel<f32>, dir: &Path, seed: u64, step: usize) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in model.tensors("") {
        let file = format!("{name}.bin");
        let shape = t.shape().to_vec();
        blob::write(&dir.join(&file), &shape, t.iter().copied())?;
        tensors.push(TensorEntry { name, file, shape });
    }
    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        arch: model.config.arch,
        embed_dim: model.embed_dim(),
        hidden: model.hidden(),
        slots: model.slots(),
        seed,
        step,
        model: model.config.clone(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!("unsupported schema version {}", m.schema_version)));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<(SecoModel<f32>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = SecoModel::<f32>::new(&manifest.model, manifest.seed)?;
    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut missing = Vec::new();
    for (name, mut t) in model.tensors_mut("") {
        let Some(entry) = entries.get(name.as_str()) else {
            missing.push(name);
            continue;
        };
        fill(&mut t, &dir.join(&entry.file), &name)?;
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("tensors missing from manifest: {missing:?}")));
    }
    if manifest.tensors.len() != model.tensors("").len() {
        return Err(Error::Checkpoint("manifest lists tensors the model does not have".into()));
    }
    Ok((model, manifest))
}

/// Copies every tensor of the checkpoint at `dir` whose name and shape match a
/// tensor of `model`, e.g. externally pretrained encoder weights. Returns the
/// number of tensors copied.
pub fn import_tensors(model: &mut SecoModel<f32>, dir: &Path, prefix: &str) -> Result<usize> {
    let manifest = read_manifest(dir)?;
    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut copied = 0;
    for (name, mut t) in model.tensors_mut("") {
        if !name.starts_with(prefix) {
            continue;
        }
        if let Some(entry) = entries.get(name.as_str()) {
            if entry.shape == t.shape() {
                fill(&mut t, &dir.join(&entry.file), &name)?;
                copied += 1;
            }
        }
    }
    Ok(copied)
}

fn fill(t: &mut ndarray::ArrayViewMutD<'_, f32>, path: &Path, name: &str) -> Result<()> {
    let (shape, data) = blob::read(path)?;
    if shape != t.shape() {
        return Err(Error::Checkpoint(format!("{name}: stored shape {shape:?}, expected {:?}", t.shape())));
    }
    for (dst, src) in t.iter_mut().zip(data) {
        *dst = src;
    }
    Ok(())
}

/// SHA-256 over the manifest and every blob, in manifest order.
pub fn digest(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let manifest = read_manifest(dir)?;
    let mut h = Sha256::new();
    h.update(fs::read(dir.join("manifest.json"))?);
    for e in &manifest.tensors {
        h.update(fs::read(dir.join(&e.file))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
