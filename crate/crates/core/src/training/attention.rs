use super::{
    accumulate_grads, epoch_order, named_grads, EpochStats, HyperParams, MeanStd, Optimizer, TrainError, TrainOutcome,
};
use crate::heatmap::{magnification_stack, normalize, Heatmap, MagBin, Norm};
use crate::metrics::{cc, kld, nss, pearson, Fixations, KLD_EPS};
use crate::models::{build_prostattformer, prostattformer_forward, ModelConfig, ModelParams, ProstAttFormerConfig};
use crate::telemetry::{Expertise, FeatureGrid, Session};
use crate::tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSample {
    pub features: FeatureGrid,
    /// Min-max normalized target on the model grid.
    pub target: Heatmap,
}

fn check_samples(config: &ProstAttFormerConfig, samples: &[AttentionSample]) -> Result<(), TrainError> {
    for (i, s) in samples.iter().enumerate() {
        if !s.target.grid().same_shape(&config.grid) {
            return Err(TrainError::ShapeMismatch(format!(
                "target {i} is not on the model grid"
            )));
        }
        let v = s.target.values();
        if v.iter().all(|&x| x == v[0]) {
            return Err(TrainError::DegenerateTarget(i));
        }
    }
    Ok(())
}

/// Mean CC between raw model scores and targets; a constant prediction scores 0.
fn mean_cc(
    config: &ProstAttFormerConfig,
    params: &ModelParams,
    samples: &[AttentionSample],
) -> Result<f64, TrainError> {
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let out = build_prostattformer(&mut g, &b, config, &s.features)?;
            Ok(pearson(g.value(out), s.target.values()).unwrap_or(0.0))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mini-batch training with loss `1 − CC`. Scores are monitored on `val`
/// (or the training set when absent) after every epoch, and the parameters
/// from the best epoch are returned.
pub fn train_attention(
    config: &ProstAttFormerConfig,
    train: &[AttentionSample],
    val: Option<&[AttentionSample]>,
    hyper: &HyperParams,
) -> Result<TrainOutcome, TrainError> {
    hyper.validate()?;
    if train.is_empty() || val.is_some_and(<[_]>::is_empty) {
        return Err(TrainError::EmptyDataset);
    }
    check_samples(config, train)?;
    let monitor_set = val.unwrap_or(train);
    check_samples(config, monitor_set)?;

    let mut params = config.init_params(hyper.seed)?;
    let mut opt = Optimizer::from_hyper(hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut curve = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        let order = epoch_order(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let coef = 1.0 / batch.len() as f64;
            let per_sample: Vec<(f64, BTreeMap<String, Vec<f64>>, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let mut g = Graph::new();
                    let b = params.bind(&mut g);
                    let out = build_prostattformer(&mut g, &b, config, &s.features)?;
                    let loss = g.cc_loss(out, s.target.values())?;
                    let grads = g.backward(loss)?;
                    Ok((coef, named_grads(&b, &grads), g.value(loss)[0]))
                })
                .collect::<Result<_, TrainError>>()?;
            loss_sum += per_sample.iter().map(|(_, _, l)| l).sum::<f64>();
            let weighted: Vec<_> = per_sample.into_iter().map(|(c, g, _)| (c, g)).collect();
            accumulate_grads(&mut params, &weighted);
            opt.step(&mut params);
        }
        let monitor = mean_cc(config, &params, monitor_set)?;
        curve.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            monitor,
        });
        if monitor > best.0 {
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

/// Which readers contribute to a target map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortFilter {
    #[default]
    All,
    Specialist,
    NonSpecialist,
    Resident,
    General,
}

impl CohortFilter {
    pub fn matches(self, e: Expertise) -> bool {
        match self {
            CohortFilter::All => true,
            CohortFilter::Specialist => e == Expertise::Specialist,
            CohortFilter::NonSpecialist => e != Expertise::Specialist,
            CohortFilter::Resident => e == Expertise::Resident,
            CohortFilter::General => e == Expertise::General,
        }
    }
}

/// Mean of the unit-sum bin maps of every matching session on `wsi_id`.
/// Sessions with no dwell in the bin are left out.
pub fn mean_attention_map(
    sessions: &[Session],
    wsi_id: &str,
    bin: &MagBin,
    filter: CohortFilter,
) -> Result<Heatmap, TrainError> {
    let mut total = Heatmap::zeros(bin.grid.clone());
    let mut n = 0usize;
    for s in sessions
        .iter()
        .filter(|s| s.wsi_id == wsi_id && filter.matches(s.expertise))
    {
        let stack = magnification_stack(s, std::slice::from_ref(bin))?;
        let map = &stack.maps[0].heatmap;
        if map.sum() > 0.0 {
            total = total.add(&normalize(map, Norm::UnitSum)?);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::NoSessions);
    }
    Ok(total.scaled(1.0 / n as f64).with_norm(Norm::UnitSum))
}

/// [`mean_attention_map`] rescaled to `[0, 1]` for training.
pub fn build_attention_targets(
    sessions: &[Session],
    wsi_id: &str,
    bin: &MagBin,
    filter: CohortFilter,
) -> Result<Heatmap, TrainError> {
    let mean = mean_attention_map(sessions, wsi_id, bin, filter)?;
    Ok(normalize(&mean, Norm::MinMax)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEvalItem {
    pub wsi_id: String,
    pub features: FeatureGrid,
    pub target: Heatmap,
    pub fixations: Fixations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemScores {
    pub wsi_id: String,
    pub cc: f64,
    pub nss: f64,
    pub kld: f64,
}

/// Metrics for one magnification level, summarized over slides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelMetrics {
    pub level: String,
    pub items: Vec<ItemScores>,
    /// Slides skipped because a metric was undefined (e.g. flat prediction).
    pub failed: Vec<String>,
    pub cc: MeanStd,
    pub nss: MeanStd,
    pub kld: MeanStd,
}

/// Scores `(wsi, prediction, target, fixations)` tuples: CC(pred, target),
/// NSS(pred, fixations) and KL(target ‖ pred).
pub fn score_attention_maps(level: &str, items: &[(String, Heatmap, Heatmap, Fixations)]) -> LevelMetrics {
    let mut scored = Vec::new();
    let mut failed = Vec::new();
    for (wsi, pred, target, fix) in items {
        let r = (|| -> Result<ItemScores, TrainError> {
            Ok(ItemScores {
                wsi_id: wsi.clone(),
                cc: cc(pred, target)?,
                nss: nss(pred, fix)?,
                kld: kld(target, pred, KLD_EPS)?,
            })
        })();
        match r {
            Ok(s) => scored.push(s),
            Err(_) => failed.push(wsi.clone()),
        }
    }
    let col = |f: fn(&ItemScores) -> f64| MeanStd::of(&scored.iter().map(f).collect::<Vec<_>>());
    LevelMetrics {
        level: level.to_string(),
        cc: col(|s| s.cc),
        nss: col(|s| s.nss),
        kld: col(|s| s.kld),
        items: scored,
        failed,
    }
}

/// Predicts every test slide with `params` and scores it.
pub fn evaluate_attention(params: &ModelParams, items: &[AttentionEvalItem]) -> Result<LevelMetrics, TrainError> {
    let ModelConfig::Prostattformer(config) = &params.config else {
        return Err(TrainError::ShapeMismatch(
            "parameters are not an attention model".into(),
        ));
    };
    let level = config
        .grid
        .mag_level
        .clone()
        .unwrap_or_else(|| format!("{}x{}", config.grid.rows, config.grid.cols));
    let scored: Vec<(String, Heatmap, Heatmap, Fixations)> = items
        .par_iter()
        .map(|it| {
            let pred = prostattformer_forward(&it.features, params)?;
            Ok((it.wsi_id.clone(), pred.heatmap, it.target.clone(), it.fixations.clone()))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(score_attention_maps(&level, &scored))
}

/// One [`LevelMetrics`] per magnification, i.e. one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionTable {
    pub levels: Vec<LevelMetrics>,
}

impl AttentionTable {
    /// `level,metric,mean,std,n`: one block of three metric rows per level.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,metric,mean,std,n\n");
        for l in &self.levels {
            for (name, m) in [("cc", l.cc), ("nss", l.nss), ("kld", l.kld)] {
                out.push_str(&format!("{},{},{:.6},{:.6},{}\n", l.level, name, m.mean, m.std, m.n));
            }
        }
        out
    }

    /// Combines folds two ways: pooled over every test slide, and over the
    /// per-fold means. Levels keep the order of the first fold.
    pub fn folds_to_csv(folds: &[AttentionTable]) -> String {
        let mut out =
            String::from("level,metric,mean_over_wsis,std_over_wsis,n_wsis,mean_over_folds,std_over_folds,k\n");
        let Some(first) = folds.first() else { return out };
        for l in &first.levels {
            let per_level: Vec<&LevelMetrics> = folds
                .iter()
                .filter_map(|f| f.levels.iter().find(|x| x.level == l.level))
                .collect();
            for (name, pick) in [
                ("cc", (|s: &ItemScores| s.cc) as fn(&ItemScores) -> f64),
                ("nss", |s: &ItemScores| s.nss),
                ("kld", |s: &ItemScores| s.kld),
            ] {
                let pooled: Vec<f64> = per_level.iter().flat_map(|m| m.items.iter().map(pick)).collect();
                let fold_means: Vec<f64> = per_level
                    .iter()
                    .filter(|m| !m.items.is_empty())
                    .map(|m| m.items.iter().map(pick).sum::<f64>() / m.items.len() as f64)
                    .collect();
                let w = MeanStd::of(&pooled);
                let f = MeanStd::of(&fold_means);
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{},{:.6},{:.6},{}\n",
                    l.level, name, w.mean, w.std, w.n, f.mean, f.std, f.n
                ));
            }
        }
        out
    }
}
