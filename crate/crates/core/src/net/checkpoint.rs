//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! blob per parameter, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{NetConfig, Role};
use super::model::ModelHandle;
use super::params::ParamSet;
use crate::error::{Error, Result};
use hazekit_tape::{Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Network description; its schema depends on `role`.
    pub net_config: serde_json::Value,
    pub role: String,
    pub step: u64,
    pub phase: String,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
}

/// Writes `params` under `dir`, replacing an existing checkpoint there.
pub fn save_params<E: Element>(
    dir: &Path,
    net_config: serde_json::Value,
    role: &str,
    step: u64,
    phase: &str,
    params: &ParamSet<E>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        let file = format!("{i:04}_{name}.f32");
        let mut bytes = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), file });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        net_config,
        role: role.to_string(),
        step,
        phase: phase.to_string(),
        dtype: "float32".into(),
        params: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Input(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            manifest.format_version
        )));
    }
    if manifest.dtype != "float32" {
        return Err(Error::Input(format!("{}: unsupported dtype {}", path.display(), manifest.dtype)));
    }
    Ok(manifest)
}

pub fn load_params<E: Element>(dir: &Path) -> Result<(CheckpointManifest, ParamSet<E>)> {
    let manifest = read_manifest(dir)?;
    let mut params = ParamSet::new();
    for entry in &manifest.params {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let numel: usize = entry.shape.iter().product();
        if bytes.len() != 4 * numel {
            return Err(Error::Input(format!("{}: {} bytes for shape {:?}", path.display(), bytes.len(), entry.shape)));
        }
        let data = bytes.chunks_exact(4).map(|c| E::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        params.push(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
    }
    Ok((manifest, params))
}

impl<E: Element> ModelHandle<E> {
    pub fn save(&self, dir: &Path, step: u64, phase: &str) -> Result<()> {
        save_params(dir, serde_json::to_value(self.config())?, self.role().as_str(), step, phase, self.params())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = load_params(dir)?;
        let config: NetConfig = serde_json::from_value(manifest.net_config)?;
        let role: Role = manifest.role.parse()?;
        Self::from_params(config, role, params)
    }
}
