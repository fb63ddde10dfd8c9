//! Checkpoint directories: one `.ten` file per parameter plus a manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::prompt::PROMPT_PREFIX;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::types::Cell;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    /// Cells the weights were trained on; empty for untrained weights.
    pub trained_cells: Vec<Cell>,
    pub params: Vec<ParamEntry>,
    pub prompt_params: usize,
    pub total_params: usize,
}

impl CheckpointManifest {
    /// Prompt and total scalar counts recomputed from the listed shapes.
    pub fn counted(&self) -> (usize, usize) {
        let numel = |e: &ParamEntry| e.shape.iter().product::<usize>();
        let prompt = self
            .params
            .iter()
            .filter(|e| e.name.starts_with(PROMPT_PREFIX))
            .map(numel)
            .sum();
        (prompt, self.params.iter().map(numel).sum())
    }
}

/// Writes `model` below `dir`. Weights are stored as f32.
pub fn save_checkpoint(model: &Model, dir: &Path, train: Option<&TrainConfig>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.params.len());
    for (_, name, value) in model.params.iter() {
        let file = format!("{name}.ten");
        value.save_ten(&dir.join(&file))?;
        params.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        model: model.config.clone(),
        seed: model.config.init_seed,
        train: train.cloned(),
        trained_cells: train.map(|t| t.cells.clone()).unwrap_or_default(),
        params,
        prompt_params: model.prompt_param_count(),
        total_params: model.param_count(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.model.clone())?;
    if manifest.params.len() != model.params.len() {
        return Err(Error::format(
            dir.join(MANIFEST_FILE),
            format!("{} parameters listed, model has {}", manifest.params.len(), model.params.len()),
        ));
    }
    for entry in &manifest.params {
        let id = model.params.id(&entry.name).ok_or_else(|| {
            Error::format(dir.join(MANIFEST_FILE), format!("unknown parameter `{}`", entry.name))
        })?;
        let value = Tensor::load_ten(&dir.join(&entry.file))?;
        model.params.set(id, value)?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::toy()).unwrap();
        let saved = save_checkpoint(&model, dir.path(), None).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(saved, manifest);
        assert_eq!(manifest.counted(), (model.prompt_param_count(), model.param_count()));
        for ((_, _, a), (_, _, b)) in model.params.iter().zip(loaded.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
