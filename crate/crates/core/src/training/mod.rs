//! Optimizers, grouped cross-validation, the two training loops and their
//! evaluation reports.

mod attention;
mod classify;
mod expertise;

pub use attention::{
    build_attention_targets, evaluate_attention, mean_attention_map, score_attention_maps, train_attention,
    AttentionEvalItem, AttentionSample, AttentionTable, CohortFilter, ItemScores, LevelMetrics,
};
pub use classify::{classification_metrics, roc_auc, softmax, ClassificationReport};
pub use expertise::{auto_class_weights, predict_expertise, train_expertise, ClassWeights, ExpertiseSample};

use crate::heatmap::HeatmapError;
use crate::metrics::MetricError;
use crate::models::{ModelError, ModelParams};
use crate::tensor::{Gradients, TensorError};
use crate::util::mean_std;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("{groups} groups cannot fill {k} folds")]
    TooFewGroups { groups: usize, k: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("no sessions match the request")]
    NoSessions,
    #[error("sample {0} has a constant target map")]
    DegenerateTarget(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    AdamDecoupled,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Stop once the monitored score reaches this value.
    pub target_score: Option<f64>,
    /// Random flips and transposes of expertise inputs during training.
    pub augment: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 50,
            seed: 0,
            optimizer: OptimizerKind::AdamDecoupled,
            target_score: None,
            augment: false,
        }
    }
}

impl HyperParams {
    /// `lr = 0` is accepted so the optimizer contract can be exercised.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidHyper(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidHyper(
                "lr and weight_decay must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay, or plain SGD with the same decay rule.
/// Both read each parameter's gradient slot.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_hyper(h: &HyperParams) -> Self {
        Self::new(h.optimizer, h.lr, h.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in data.iter_mut().zip(&grad) {
                        *p -= self.lr * (g + self.weight_decay * *p);
                    }
                }
                OptimizerKind::AdamDecoupled => {
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    for i in 0..data.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                        data[i] -= self.lr * (update + self.weight_decay * data[i]);
                    }
                }
            }
        }
    }
}

/// Splits item indices into `k` folds so that no group spans two folds.
/// Distinct groups are sorted, shuffled with `seed` and dealt round-robin.
pub fn kfold_split<T>(
    items: &[T],
    k: usize,
    seed: u64,
    group_key: impl Fn(&T) -> String,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut groups: Vec<String> = items
        .iter()
        .map(&group_key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if k < 2 || groups.len() < k {
        return Err(TrainError::TooFewGroups {
            groups: groups.len(),
            k,
        });
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<String, usize> = groups.into_iter().enumerate().map(|(i, g)| (g, i % k)).collect();
    let mut folds = vec![Vec::new(); k];
    for (i, item) in items.iter().enumerate() {
        folds[fold_of[&group_key(item)]].push(i);
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd {
            mean,
            std,
            n: values.len(),
        }
    }
}

/// Per-fold metric values with their mean and population std over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<BTreeMap<String, f64>>,
    pub summary: BTreeMap<String, MeanStd>,
}

impl FoldReport {
    pub fn new(folds: Vec<BTreeMap<String, f64>>) -> Self {
        let names: BTreeSet<&String> = folds.iter().flat_map(|f| f.keys()).collect();
        let summary = names
            .into_iter()
            .map(|n| {
                let vals: Vec<f64> = folds.iter().filter_map(|f| f.get(n).copied()).collect();
                (n.clone(), MeanStd::of(&vals))
            })
            .collect();
        FoldReport { folds, summary }
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `metric,fold_1..fold_k,mean,std`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for i in 0..self.folds.len() {
            out.push_str(&format!(",fold_{}", i + 1));
        }
        out.push_str(",mean,std\n");
        for (name, s) in &self.summary {
            out.push_str(name);
            for f in &self.folds {
                match f.get(name) {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{:.6},{:.6}\n", s.mean, s.std));
        }
        out
    }
}

/// One entry of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Score on the monitored set (validation if given, else training).
    pub monitor: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best monitored score.
    pub params: ModelParams,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Accumulates per-sample gradients `coef · ∂loss/∂θ` in a fixed order.
pub(crate) fn accumulate_grads(params: &mut ModelParams, per_sample: &[(f64, BTreeMap<String, Vec<f64>>)]) {
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let n = params.get(&name).map(|t| t.len()).unwrap_or(0);
        let mut total = vec![0.0; n];
        for (coef, grads) in per_sample {
            if let Some(g) = grads.get(&name) {
                for (t, v) in total.iter_mut().zip(g) {
                    *t += coef * v;
                }
            }
        }
        if let Some(t) = params.get_mut(&name) {
            t.set_grad(total);
        }
    }
}

pub(crate) fn named_grads(bound: &crate::models::BoundParams, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
    bound
        .iter()
        .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.to_vec())))
        .collect()
}

pub(crate) fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
