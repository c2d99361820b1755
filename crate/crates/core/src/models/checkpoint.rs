use super::{ModelConfig, ModelParams, ParamRole};
use crate::telemetry::{decode_atnt, encode_atnt, AtntTensor, TelemetryError};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor file {file}: {source}")]
    Tensor { file: String, source: TelemetryError },
    #[error("{name}: stored shape {found:?} differs from manifest {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("config hash {found} does not match manifest {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint lacks parameter {0}")]
    Incomplete(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub config_hash: String,
    pub params: Vec<ManifestEntry>,
    pub notes: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn notes_for(config: &ModelConfig) -> BTreeMap<String, String> {
    let mut notes = BTreeMap::new();
    notes.insert("storage".into(), "little-endian f32 ATNT, row-major".into());
    match config {
        ModelConfig::Prostattformer(_) => {
            notes.insert("block".into(), "pre-norm: x + mhsa(ln1(x)); x + mlp(ln2(x))".into());
            notes.insert("mlp".into(), "linear(w1) -> gelu (erf) -> linear(w2)".into());
            notes.insert(
                "layout".into(),
                "linear weights are [in, out]; pos is [rows*cols, dim] row-major over the grid".into(),
            );
        }
        ModelConfig::Expertisenet(_) => {
            notes.insert(
                "layout".into(),
                "conv1x1 weights are [c_in, c_out]; inputs are channels-first [c, rows, cols]".into(),
            );
            notes.insert(
                "concat_order".into(),
                "wsi, temporal (25/50/75/100%), magnification (2x/4x/10x/20x)".into(),
            );
            notes.insert(
                "activations".into(),
                "relu after each encoder conv; the decoder conv is linear".into(),
            );
        }
    }
    notes
}

fn file_name(param: &str) -> String {
    format!("{param}.atnt")
}

/// Writes one ATNT file per parameter plus `manifest.json` into `dir`.
pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<Checkpoint, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    for (name, t) in params.iter() {
        let file = file_name(name);
        let path = dir.join(&file);
        let bytes = encode_atnt(&AtntTensor::from_f64(t.dims(), t.data()));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        let role = params.role(name).unwrap_or(ParamRole::Weight);
        entries.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: t.dims().to_vec(),
            role,
        });
    }
    let manifest = Checkpoint {
        config: params.config.clone(),
        seed: params.seed,
        config_hash: params.config_hash.clone(),
        params: entries,
        notes: notes_for(&params.config),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads a checkpoint written by [`save_checkpoint`]. Values come back at
/// f32 precision.
pub fn load_checkpoint(dir: &Path) -> Result<ModelParams, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Checkpoint = serde_json::from_str(&text)?;
    let found = manifest.config.hash();
    if found != manifest.config_hash {
        return Err(CheckpointError::HashMismatch {
            expected: manifest.config_hash,
            found,
        });
    }

    let mut tensors = BTreeMap::new();
    let mut roles = BTreeMap::new();
    for e in &manifest.params {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let t = decode_atnt(&bytes).map_err(|source| CheckpointError::Tensor {
            file: e.file.clone(),
            source,
        })?;
        let shape = t.dims_usize();
        if shape != e.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: e.name.clone(),
                expected: e.shape.clone(),
                found: shape,
            });
        }
        let tensor = Tensor::param(shape, t.to_f64()).map_err(|_| CheckpointError::Tensor {
            file: e.file.clone(),
            source: TelemetryError::NonFiniteValue(0),
        })?;
        tensors.insert(e.name.clone(), tensor);
        roles.insert(e.name.clone(), e.role);
    }

    // completeness against a fresh initialization of the same config
    let reference = match &manifest.config {
        ModelConfig::Prostattformer(c) => c.init_params(0),
        ModelConfig::Expertisenet(c) => c.init_params(0),
    }
    .map_err(|_| CheckpointError::Incomplete("invalid config".into()))?;
    for (name, t) in reference.iter() {
        match tensors.get(name) {
            None => return Err(CheckpointError::Incomplete(name.to_string())),
            Some(loaded) if loaded.dims() != t.dims() => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.dims().to_vec(),
                    found: loaded.dims().to_vec(),
                })
            }
            _ => {}
        }
    }
    Ok(ModelParams::from_parts(manifest.config, manifest.seed, tensors, roles))
}
