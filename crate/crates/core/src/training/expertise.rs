use super::{
    accumulate_grads, epoch_order, named_grads, softmax, EpochStats, HyperParams, Optimizer, TrainError, TrainOutcome,
};
use crate::models::{build_expertisenet, ExpertiseNetConfig, ExpertiseTensors, ModelConfig, ModelParams};
use crate::tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One scanpath with its reader's class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertiseSample {
    pub wsi_id: String,
    pub inputs: ExpertiseTensors,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeights {
    /// Inverse class frequency, normalized to mean 1.
    #[default]
    Auto,
    Uniform,
    Given(Vec<f64>),
}

/// Inverse-frequency weights normalized to mean 1 over the classes present.
/// Absent classes get weight 1; they never enter the loss.
pub fn auto_class_weights(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| 1.0 / c as f64)).collect();
    let present: Vec<f64> = inv.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0; counts.len()];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    inv.iter().map(|w| w.map_or(1.0, |w| w / mean)).collect()
}

fn logits_for(config: &ExpertiseNetConfig, params: &ModelParams, x: &ExpertiseTensors) -> Result<Vec<f64>, TrainError> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = build_expertisenet(&mut g, &b, config, x)?;
    Ok(g.value(out).to_vec())
}

/// Softmax class probabilities for each sample.
pub fn predict_expertise(params: &ModelParams, samples: &[ExpertiseSample]) -> Result<Vec<Vec<f64>>, TrainError> {
    let ModelConfig::Expertisenet(config) = &params.config else {
        return Err(TrainError::ShapeMismatch(
            "parameters are not an expertise model".into(),
        ));
    };
    samples
        .par_iter()
        .map(|s| Ok(softmax(&logits_for(config, params, &s.inputs)?)))
        .collect()
}

fn accuracy(config: &ExpertiseNetConfig, params: &ModelParams, samples: &[ExpertiseSample]) -> Result<f64, TrainError> {
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            let l = logits_for(config, params, &s.inputs)?;
            let mut best = 0;
            for (i, &v) in l.iter().enumerate() {
                if v > l[best] {
                    best = i;
                }
            }
            Ok(best == s.label)
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Weighted cross-entropy training. Accuracy on `val` (or the training set)
/// is monitored each epoch; ties keep the later epoch.
pub fn train_expertise(
    config: &ExpertiseNetConfig,
    train: &[ExpertiseSample],
    val: Option<&[ExpertiseSample]>,
    hyper: &HyperParams,
    weights: &ClassWeights,
) -> Result<TrainOutcome, TrainError> {
    hyper.validate()?;
    if train.is_empty() || val.is_some_and(<[_]>::is_empty) {
        return Err(TrainError::EmptyDataset);
    }
    let k = config.n_classes;
    if let Some(s) = train.iter().chain(val.unwrap_or(&[])).find(|s| s.label >= k) {
        return Err(TrainError::ShapeMismatch(format!(
            "label {} outside {k} classes",
            s.label
        )));
    }
    let mut counts = vec![0usize; k];
    for s in train {
        counts[s.label] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(TrainError::SingleClass);
    }
    let class_weights = match weights {
        ClassWeights::Auto => auto_class_weights(&counts),
        ClassWeights::Uniform => vec![1.0; k],
        ClassWeights::Given(w) if w.len() == k && w.iter().all(|&v| v > 0.0) => w.clone(),
        ClassWeights::Given(_) => return Err(TrainError::InvalidHyper(format!("need {k} positive class weights"))),
    };

    let mut params = config.init_params(hyper.seed)?;
    let mut opt = Optimizer::from_hyper(hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let monitor_set = val.unwrap_or(train);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut curve = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        let order = epoch_order(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let ops: Vec<u8> = batch
                .iter()
                .map(|_| if hyper.augment { rng.random_range(0..8) } else { 0 })
                .collect();
            let batch_weight: f64 = batch.iter().map(|&i| class_weights[train[i].label]).sum();
            // per-sample CE; the batch loss Σ w_i ce_i / Σ w_i is assembled from these
            let per_sample: Vec<(f64, BTreeMap<String, Vec<f64>>, f64)> = batch
                .par_iter()
                .zip(&ops)
                .map(|(&i, &op)| {
                    let s = &train[i];
                    let mut g = Graph::new();
                    let b = params.bind(&mut g);
                    let logits = if op == 0 {
                        build_expertisenet(&mut g, &b, config, &s.inputs)?
                    } else {
                        build_expertisenet(&mut g, &b, config, &s.inputs.dihedral(op))?
                    };
                    let loss = g.weighted_ce_loss(logits, &[s.label], &vec![1.0; k])?;
                    let grads = g.backward(loss)?;
                    let w = class_weights[s.label];
                    Ok((w / batch_weight, named_grads(&b, &grads), w * g.value(loss)[0]))
                })
                .collect::<Result<_, TrainError>>()?;
            loss_sum += per_sample.iter().map(|(_, _, l)| l).sum::<f64>();
            weight_sum += batch_weight;
            let weighted: Vec<_> = per_sample.into_iter().map(|(c, g, _)| (c, g)).collect();
            accumulate_grads(&mut params, &weighted);
            opt.step(&mut params);
        }
        let monitor = accuracy(config, &params, monitor_set)?;
        curve.push(EpochStats {
            epoch,
            train_loss: loss_sum / weight_sum,
            monitor,
        });
        if monitor >= best.0 {
            best = (monitor, epoch, params.clone());
        }
        if hyper.target_score.is_some_and(|t| monitor >= t) {
            break;
        }
    }
    let (_, best_epoch, params) = best;
    Ok(TrainOutcome {
        params,
        curve,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_weights_from_cohort_counts() {
        let w = auto_class_weights(&[329, 158, 529]);
        let inv = [1.0 / 329.0, 1.0 / 158.0, 1.0 / 529.0];
        let mean = inv.iter().sum::<f64>() / 3.0;
        for (a, b) in w.iter().zip(inv) {
            assert!((a - b / mean).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(auto_class_weights(&[40, 40, 40])
            .iter()
            .all(|w| (w - 1.0).abs() < 1e-15));
    }
}
