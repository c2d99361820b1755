//! The attention predictor and the expertise classifier, assembled from
//! [`crate::tensor`] ops, plus parameter storage and checkpoints.

mod checkpoint;
mod expertisenet;
mod prostattformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ManifestEntry};
pub use expertisenet::{
    ablation_variant, build_expertisenet, expertisenet_forward, AblationMode, ExpertiseNetConfig, ExpertiseTensors,
    MapStack,
};
pub use prostattformer::{
    build_prostattformer, prostattformer_forward, prostattformer_param_count, PredictedMap, ProstAttFormerConfig,
};

use crate::heatmap::HeatmapError;
use crate::telemetry::TelemetryError;
use crate::tensor::{Gradients, Graph, Tensor, TensorError, Var};
use crate::util::{derive_seed, fnv1a};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Format(#[from] TelemetryError),
}

/// Either network's configuration; the tag is what manifests record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    Prostattformer(ProstAttFormerConfig),
    Expertisenet(ExpertiseNetConfig),
}

impl ModelConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

/// What a parameter is for; decides its initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Position,
}

/// Named parameter tensors for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub config_hash: String,
    tensors: BTreeMap<String, Tensor>,
    roles: BTreeMap<String, ParamRole>,
}

const INIT_STD: f64 = 0.02;

fn truncated_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect()
}

impl ModelParams {
    /// Deterministic initialization from a shape table: truncated normal
    /// (σ = 0.02, cut at 2σ) for weights and positions, zeros for biases and
    /// norm shifts, ones for norm scales. Each tensor draws from its own
    /// stream derived from `(seed, name)`.
    pub(crate) fn init(config: ModelConfig, shapes: Vec<(String, Vec<usize>, ParamRole)>, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        let mut roles = BTreeMap::new();
        for (name, dims, role) in shapes {
            let n = dims.iter().product();
            let data = match role {
                ParamRole::Weight | ParamRole::Position => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                    truncated_normal(&mut rng, n)
                }
                ParamRole::Bias | ParamRole::NormShift => vec![0.0; n],
                ParamRole::NormScale => vec![1.0; n],
            };
            tensors.insert(name.clone(), Tensor::param(dims, data).expect("init shapes are valid"));
            roles.insert(name, role);
        }
        let config_hash = config.hash();
        ModelParams {
            config,
            seed,
            config_hash,
            tensors,
            roles,
        }
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        seed: u64,
        tensors: BTreeMap<String, Tensor>,
        roles: BTreeMap<String, ParamRole>,
    ) -> Self {
        let config_hash = config.hash();
        ModelParams {
            config,
            seed,
            config_hash,
            tensors,
            roles,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn role(&self, name: &str) -> Option<ParamRole> {
        self.roles.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g` as a gradient-requiring leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), g.leaf(t))).collect(),
        }
    }

    /// Overwrites each parameter's gradient slot from `grads`.
    pub fn store_grads(&mut self, bound: &BoundParams, grads: &Gradients) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(g) = bound.vars.get(name).and_then(|v| grads.get(*v)) {
                t.set_grad(g.to_vec());
            }
        }
    }
}

/// Parameter name → graph variable for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
