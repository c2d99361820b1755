use crate::commands::level_label;
use crate::config::{ExperimentConfig, Task};
use crate::error::{CliError, Result};
use crate::{fsio, Ctx};
use attnscope::heatmap::{default_mag_bins, resample, MagBin};
use attnscope::metrics::Fixations;
use attnscope::models::{
    ablation_variant, expertisenet_forward, load_checkpoint, prostattformer_forward, save_checkpoint, AblationMode,
    ExpertiseNetConfig, ExpertiseTensors, MapStack, ProstAttFormerConfig,
};
use attnscope::telemetry::FeatureGrid;
use attnscope::training::{
    build_attention_targets, classification_metrics, evaluate_attention, kfold_split, predict_expertise,
    score_attention_maps, train_attention, train_expertise, AttentionEvalItem, AttentionSample, AttentionTable,
    ExpertiseSample, FoldReport, LevelMetrics, MeanStd, TrainError, TrainOutcome,
};
use attnscope::{CohortFilter, Expertise, GridSpec, Heatmap, ModelConfig, ModelParams, Session};
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

/// The default bin matching a model grid, by level label or else by shape.
fn bin_for_grid(grid: &GridSpec) -> Result<MagBin> {
    let bins = default_mag_bins();
    let found = match &grid.mag_level {
        Some(l) => bins.into_iter().find(|b| &b.label == l),
        None => bins.into_iter().find(|b| b.grid.same_shape(grid)),
    };
    found.ok_or_else(|| {
        CliError::data(format!(
            "no magnification bin for a {}x{} model grid",
            grid.rows, grid.cols
        ))
    })
}

/// Viewport centers of every matching reader of `wsi`.
fn fixations_for(sessions: &[Session], wsi: &str, grid: &GridSpec, filter: CohortFilter) -> Fixations {
    Fixations::new(
        sessions
            .iter()
            .filter(|s| s.wsi_id == wsi && filter.matches(s.expertise))
            .flat_map(|s| Fixations::from_session(s, grid).cells)
            .collect(),
    )
}

fn sorted_wsis(sessions: &[Session]) -> Vec<String> {
    let mut w: Vec<String> = sessions.iter().map(|s| s.wsi_id.clone()).collect();
    w.sort();
    w.dedup();
    w
}

/// A slide's training sample and the fixations used to score it.
type LevelItem = (String, AttentionSample, Fixations);

struct Curves(String);

impl Curves {
    fn new() -> Self {
        Curves("fold,model,epoch,train_loss,monitor\n".into())
    }

    fn add(&mut self, fold: usize, model: &str, outcome: &TrainOutcome) {
        for e in &outcome.curve {
            let _ = writeln!(
                self.0,
                "{},{model},{},{:.6},{:.6}",
                fold + 1,
                e.epoch,
                e.train_loss,
                e.monitor
            );
        }
    }
}

fn model_entry(name: &str, dir: &Path, params: &ModelParams, outcome: &TrainOutcome) -> serde_json::Value {
    json!({
        "model": name,
        "dir": dir.file_name().map(|d| d.to_string_lossy().into_owned()),
        "config_hash": params.config_hash,
        "seed": params.seed,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.curve.len(),
    })
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let path = ctx
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage("train needs --config EXPERIMENT.json"))?;
    let config = ExperimentConfig::load(path, ctx.seed)?;
    let out = ctx
        .out
        .as_ref()
        .or(config.output.as_ref())
        .ok_or_else(|| CliError::usage("train needs --out or an `output` entry in the config"))?;
    let sessions = fsio::load_sessions(&config.sessions)?;
    ctx.log(format!(
        "{} sessions, task {:?}, k = {}",
        sessions.len(),
        config.task,
        config.k
    ));
    let folds = match config.task {
        Task::Attention => train_attention_task(ctx, &config, &sessions, out)?,
        Task::Expertise => train_expertise_task(ctx, &config, &sessions, out)?,
    };
    fsio::write_json(
        &out.join("run_manifest.json"),
        &json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "task": config.task,
            "seed": config.seed,
            "fold_seeds": (0..config.k as u64).map(|f| config.seed.wrapping_add(f)).collect::<Vec<_>>(),
            "config_hash": config.hash(),
            "config": config,
            "folds": folds,
        }),
    )
}

fn train_attention_task(
    ctx: &Ctx,
    config: &ExperimentConfig,
    sessions: &[Session],
    out: &Path,
) -> Result<Vec<serde_json::Value>> {
    let spec = &config.attention;
    let wsis = sorted_wsis(sessions);
    let split = kfold_split(&wsis, config.k, config.seed, |w| w.clone())?;

    // per level: every slide with features and a usable target
    let mut data: Vec<(MagBin, Vec<LevelItem>)> = Vec::new();
    for level in &spec.levels {
        let bin = config.bin(level).expect("validated").clone();
        let mut items = Vec::new();
        for w in &wsis {
            let target = match build_attention_targets(sessions, w, &bin, config.filter) {
                Ok(t) => t,
                Err(TrainError::NoSessions | TrainError::Heatmap(_)) => {
                    ctx.log(format!("{level}: {w} has no attention in this bin, skipped"));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if target.values().iter().all(|&v| v == target.values()[0]) {
                ctx.log(format!("{level}: {w} has a flat target, skipped"));
                continue;
            }
            let features = fsio::load_features(&fsio::feature_path(&config.features, w, level))?;
            let fix = fixations_for(sessions, w, &bin.grid, config.filter);
            items.push((w.clone(), AttentionSample { features, target }, fix));
        }
        data.push((bin, items));
    }

    let mut tables = Vec::new();
    let mut mask_tables = Vec::new();
    let mut fold_metrics = Vec::new();
    let mut manifest = Vec::new();
    let mut curves = Curves::new();
    for (f, test_idx) in split.iter().enumerate() {
        let test: Vec<&String> = test_idx.iter().map(|&i| &wsis[i]).collect();
        let mut hyper = config.hyper.clone();
        hyper.seed = config.seed.wrapping_add(f as u64);
        let mut levels = Vec::new();
        let mut mask_levels = Vec::new();
        let mut models = Vec::new();
        let mut metrics = BTreeMap::new();
        for (bin, items) in &data {
            let (te, tr): (Vec<_>, Vec<_>) = items.iter().partition(|(w, _, _)| test.contains(&w));
            if tr.is_empty() || te.is_empty() {
                ctx.log(format!(
                    "fold {}: {} has no train or test slides, skipped",
                    f + 1,
                    bin.label
                ));
                continue;
            }
            let dim = tr[0].1.features.dim();
            let mc = ProstAttFormerConfig {
                grid: bin.grid.clone(),
                dim,
                layers: spec.layers,
                heads: spec.heads,
                mlp_ratio: spec.mlp_ratio,
            };
            let train_set: Vec<AttentionSample> = tr.iter().map(|(_, s, _)| s.clone()).collect();
            ctx.log(format!("fold {}: {} on {} slides", f + 1, bin.label, train_set.len()));
            let outcome = train_attention(&mc, &train_set, None, &hyper)?;
            let dir = out.join(format!("fold_{}", f + 1)).join(&bin.label);
            save_checkpoint(&outcome.params, &dir)?;
            curves.add(f, &bin.label, &outcome);
            models.push(model_entry(&bin.label, &dir, &outcome.params, &outcome));

            let eval: Vec<AttentionEvalItem> = te
                .iter()
                .map(|(w, s, fix)| AttentionEvalItem {
                    wsi_id: w.clone(),
                    features: s.features.clone(),
                    target: s.target.clone(),
                    fixations: fix.clone(),
                })
                .collect();
            if let Some(mdir) = &config.masks {
                let preds: Vec<(String, Heatmap)> = eval
                    .iter()
                    .map(|it| {
                        Ok((
                            it.wsi_id.clone(),
                            prostattformer_forward(&it.features, &outcome.params)?.heatmap,
                        ))
                    })
                    .collect::<Result<_>>()?;
                let lm = score_against_masks(&bin.label, &bin.grid, &preds, mdir)?;
                for (name, m) in [("cc", lm.cc), ("nss", lm.nss), ("kld", lm.kld)] {
                    if m.n > 0 {
                        metrics.insert(format!("{}.mask_{name}", bin.label), m.mean);
                    }
                }
                mask_levels.push(lm);
            }
            let lm = evaluate_attention(&outcome.params, &eval)?;
            for (name, m) in [("cc", lm.cc), ("nss", lm.nss), ("kld", lm.kld)] {
                if m.n > 0 {
                    metrics.insert(format!("{}.{name}", bin.label), m.mean);
                }
            }
            levels.push(lm);
        }
        let table = AttentionTable { levels };
        fsio::write(&out.join(format!("fold_{}", f + 1)).join("table1.csv"), table.to_csv())?;
        tables.push(table);
        if config.masks.is_some() {
            let table = AttentionTable { levels: mask_levels };
            fsio::write(&out.join(format!("fold_{}", f + 1)).join("table2.csv"), table.to_csv())?;
            mask_tables.push(table);
        }
        fold_metrics.push(metrics);
        manifest.push(json!({ "fold": f + 1, "test_wsis": test, "models": models }));
    }
    fsio::write(&out.join("table1.csv"), AttentionTable::folds_to_csv(&tables))?;
    if config.masks.is_some() {
        fsio::write(&out.join("table2.csv"), AttentionTable::folds_to_csv(&mask_tables))?;
    }
    fsio::write(&out.join("folds.csv"), FoldReport::new(fold_metrics).to_csv())?;
    fsio::write(&out.join("curves.csv"), curves.0)?;
    Ok(manifest)
}

fn label_of(e: Expertise, n_classes: usize) -> usize {
    if n_classes == 2 {
        (e == Expertise::Specialist) as usize
    } else {
        e.index()
    }
}

fn mode_name(m: AblationMode) -> &'static str {
    match m {
        AblationMode::TemporalOnly => "temporal_only",
        AblationMode::MagnificationOnly => "magnification_only",
        AblationMode::Both => "both",
    }
}

fn expertise_level_grid(level: &str, features: &FeatureGrid) -> GridSpec {
    GridSpec::with_level(features.grid_h(), features.grid_w(), level)
}

fn expertise_samples(
    config: &ExperimentConfig,
    sessions: &[Session],
) -> Result<(Vec<ExpertiseSample>, Vec<String>, GridSpec, usize)> {
    let level = &config.expertise.level;
    let mut cache: BTreeMap<String, FeatureGrid> = BTreeMap::new();
    let mut samples = Vec::new();
    let mut ids = Vec::new();
    let mut shape: Option<(GridSpec, usize)> = None;
    for s in sessions {
        if !cache.contains_key(&s.wsi_id) {
            let f = fsio::load_features(&fsio::feature_path(&config.features, &s.wsi_id, level))?;
            cache.insert(s.wsi_id.clone(), f);
        }
        let f = &cache[&s.wsi_id];
        let grid = expertise_level_grid(level, f);
        match &shape {
            None => shape = Some((grid.clone(), f.dim())),
            Some((g, d)) if g.same_shape(&grid) && *d == f.dim() => {}
            Some(_) => {
                return Err(CliError::data(format!(
                    "{}: feature shape differs from other slides",
                    s.wsi_id
                )))
            }
        }
        samples.push(ExpertiseSample {
            wsi_id: s.wsi_id.clone(),
            inputs: ExpertiseTensors::from_session(s, f, &grid)?,
            label: label_of(s.expertise, config.expertise.n_classes),
        });
        ids.push(s.session_id.clone());
    }
    let (grid, dim) = shape.ok_or_else(|| CliError::data("no sessions"))?;
    Ok((samples, ids, grid, dim))
}

fn table3_csv(n_classes: usize, modes: &[AblationMode], report: &FoldReport) -> String {
    let mut s =
        String::from("mode,n_classes,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,auc_mean,auc_std,k\n");
    for &m in modes {
        let get = |metric: &str| report.summary.get(&format!("{}.{metric}", mode_name(m))).copied();
        let cell = |v: Option<MeanStd>| match v {
            Some(v) if v.n > 0 => format!("{:.6},{:.6}", v.mean, v.std),
            _ => ",".to_string(),
        };
        let _ = writeln!(
            s,
            "{},{n_classes},{},{},{},{}",
            mode_name(m),
            cell(get("accuracy")),
            cell(get("macro_f1")),
            cell(get("auc")),
            report.k()
        );
    }
    s
}

fn train_expertise_task(
    ctx: &Ctx,
    config: &ExperimentConfig,
    sessions: &[Session],
    out: &Path,
) -> Result<Vec<serde_json::Value>> {
    let spec = &config.expertise;
    let (samples, ids, grid, dim) = expertise_samples(config, sessions)?;
    let split = kfold_split(&samples, config.k, config.seed, |s| s.wsi_id.clone())?;
    let base = ExpertiseNetConfig {
        grid,
        channels: spec.channels,
        ..ExpertiseNetConfig::new(dim, spec.n_classes)
    };

    let mut fold_metrics = Vec::new();
    let mut manifest = Vec::new();
    let mut curves = Curves::new();
    let mut predictions = String::from("fold,mode,session_id,wsi_id,label");
    for c in 0..spec.n_classes {
        let _ = write!(predictions, ",p{c}");
    }
    predictions.push('\n');

    for (f, test_idx) in split.iter().enumerate() {
        let test: Vec<ExpertiseSample> = test_idx.iter().map(|&i| samples[i].clone()).collect();
        let train: Vec<ExpertiseSample> = (0..samples.len())
            .filter(|i| !test_idx.contains(i))
            .map(|i| samples[i].clone())
            .collect();
        let mut hyper = config.hyper.clone();
        hyper.seed = config.seed.wrapping_add(f as u64);
        let mut metrics = BTreeMap::new();
        let mut models = Vec::new();
        for &mode in &spec.modes {
            let mc = ablation_variant(&base, mode);
            ctx.log(format!(
                "fold {}: {} on {} scanpaths",
                f + 1,
                mode_name(mode),
                train.len()
            ));
            let outcome = train_expertise(&mc, &train, None, &hyper, &spec.class_weights)?;
            let dir = out.join(format!("fold_{}", f + 1)).join(mode_name(mode));
            save_checkpoint(&outcome.params, &dir)?;
            curves.add(f, mode_name(mode), &outcome);
            models.push(model_entry(mode_name(mode), &dir, &outcome.params, &outcome));

            let probs = predict_expertise(&outcome.params, &test)?;
            let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
            let r = classification_metrics(&probs, &labels)?;
            metrics.insert(format!("{}.accuracy", mode_name(mode)), r.accuracy);
            metrics.insert(format!("{}.macro_f1", mode_name(mode)), r.macro_f1);
            if let Some(auc) = r.auc {
                metrics.insert(format!("{}.auc", mode_name(mode)), auc);
            }
            for ((&i, s), p) in test_idx.iter().zip(&test).zip(&probs) {
                let _ = write!(
                    predictions,
                    "{},{},{},{},{}",
                    f + 1,
                    mode_name(mode),
                    ids[i],
                    s.wsi_id,
                    s.label
                );
                for v in p {
                    let _ = write!(predictions, ",{v:.6}");
                }
                predictions.push('\n');
            }
        }
        fold_metrics.push(metrics);
        let test_wsis: std::collections::BTreeSet<&str> = test.iter().map(|s| s.wsi_id.as_str()).collect();
        manifest.push(json!({ "fold": f + 1, "test_wsis": test_wsis, "models": models }));
    }
    let report = FoldReport::new(fold_metrics);
    fsio::write(
        &out.join("table3.csv"),
        table3_csv(spec.n_classes, &spec.modes, &report),
    )?;
    fsio::write(&out.join("folds.csv"), report.to_csv())?;
    fsio::write(&out.join("curves.csv"), curves.0)?;
    fsio::write(&out.join("predictions.csv"), predictions)?;
    Ok(manifest)
}

/// Features named `<wsi>_<level>.atnt` in `dir`, sorted by slide.
fn features_at(dir: &Path, level: &str) -> Result<Vec<(String, FeatureGrid)>> {
    let mut out = Vec::new();
    for p in fsio::list(dir, "atnt")? {
        let stem = fsio::stem(&p);
        if let Some((w, l)) = fsio::split_feature_stem(&stem) {
            if l == level {
                out.push((w.to_string(), fsio::load_features(&p)?));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::data(format!(
            "{}: no feature files for level {level}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Scores predictions against `<wsi>.atnt` masks in `dir`. Masks are resampled
/// to `grid` with mass preserved, then rescaled to per-cell ROI coverage.
fn score_against_masks(level: &str, grid: &GridSpec, preds: &[(String, Heatmap)], dir: &Path) -> Result<LevelMetrics> {
    let mut items = Vec::new();
    for (w, p) in preds {
        let path = dir.join(format!("{w}.atnt"));
        if !path.exists() {
            continue;
        }
        let mask = fsio::load_heatmap(&path)?;
        let factor = grid.cells() as f64 / mask.grid().cells() as f64;
        let cover = resample(&mask, grid).scaled(factor);
        let fix = Fixations::from_mask(&cover);
        items.push((w.clone(), p.clone(), cover, fix));
    }
    if items.is_empty() {
        return Err(CliError::data(format!(
            "{}: no masks match the predicted slides",
            dir.display()
        )));
    }
    Ok(score_attention_maps(level, &items))
}

fn items_csv(m: &LevelMetrics) -> String {
    let mut s = String::from("wsi_id,cc,nss,kld\n");
    for i in &m.items {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", i.wsi_id, i.cc, i.nss, i.kld);
    }
    for w in &m.failed {
        let _ = writeln!(s, "{w},,,");
    }
    s
}

pub fn eval(
    ctx: &Ctx,
    checkpoint: &Path,
    features: &Path,
    sessions: Option<&Path>,
    masks: Option<&Path>,
    filter: CohortFilter,
) -> Result<()> {
    let out = ctx.out_dir()?;
    let params = load_checkpoint(checkpoint)?;
    let sessions = sessions.map(fsio::load_sessions).transpose()?;
    match &params.config {
        ModelConfig::Prostattformer(cfg) => {
            let level = level_label(&cfg.grid);
            let mut preds: Vec<(String, Heatmap)> = Vec::new();
            let mut degenerate = Vec::new();
            for (w, f) in features_at(features, &level)? {
                let p = prostattformer_forward(&f, &params)?;
                fsio::save_heatmap(&out.join("maps").join(format!("{w}_{level}.atnt")), &p.heatmap)?;
                if p.degenerate {
                    degenerate.push(w.clone());
                }
                preds.push((w, p.heatmap));
            }
            ctx.log(format!("{} maps predicted at {level}", preds.len()));
            let mut summary = json!({ "level": level, "maps": preds.len(), "degenerate": degenerate });
            if let Some(sessions) = &sessions {
                let bin = bin_for_grid(&cfg.grid)?;
                let mut items = Vec::new();
                for (w, p) in &preds {
                    match build_attention_targets(sessions, w, &bin, filter) {
                        Ok(t) => items.push((w.clone(), p.clone(), t, fixations_for(sessions, w, &bin.grid, filter))),
                        Err(TrainError::NoSessions | TrainError::Heatmap(_)) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
                let lm = score_attention_maps(&level, &items);
                fsio::write(
                    &out.join("table1.csv"),
                    AttentionTable {
                        levels: vec![lm.clone()],
                    }
                    .to_csv(),
                )?;
                fsio::write(&out.join("table1_items.csv"), items_csv(&lm))?;
                summary["readers"] = json!({ "cc": lm.cc, "nss": lm.nss, "kld": lm.kld, "failed": lm.failed });
            }
            if let Some(mdir) = masks {
                let lm = score_against_masks(&level, &cfg.grid, &preds, mdir)?;
                fsio::write(
                    &out.join("table2.csv"),
                    AttentionTable {
                        levels: vec![lm.clone()],
                    }
                    .to_csv(),
                )?;
                fsio::write(&out.join("table2_items.csv"), items_csv(&lm))?;
                summary["masks"] = json!({ "cc": lm.cc, "nss": lm.nss, "kld": lm.kld, "failed": lm.failed });
            }
            fsio::print_json(&summary);
        }
        ModelConfig::Expertisenet(cfg) => {
            let sessions = sessions.ok_or_else(|| CliError::usage("expertise checkpoints need --sessions"))?;
            let level = level_label(&cfg.grid);
            let mut rows = String::from("session_id,wsi_id,label");
            for c in 0..cfg.n_classes {
                let _ = write!(rows, ",p{c}");
            }
            rows.push('\n');
            let mut probs = Vec::new();
            let mut labels = Vec::new();
            for s in &sessions {
                let f = fsio::load_features(&fsio::feature_path(features, &s.wsi_id, &level))?;
                let logits = expertisenet_forward(
                    &f,
                    &MapStack::temporal(s, &cfg.grid)?,
                    &MapStack::magnification(s, &default_mag_bins(), &cfg.grid)?,
                    &params,
                )?;
                let p = attnscope::training::softmax(&logits);
                let label = label_of(s.expertise, cfg.n_classes);
                let _ = write!(rows, "{},{},{label}", s.session_id, s.wsi_id);
                for v in &p {
                    let _ = write!(rows, ",{v:.6}");
                }
                rows.push('\n');
                probs.push(p);
                labels.push(label);
            }
            let r = classification_metrics(&probs, &labels)?;
            fsio::write(&out.join("predictions.csv"), rows)?;
            fsio::write_json(&out.join("expertise_metrics.json"), &r)?;
            fsio::print_json(&r);
        }
    }
    Ok(())
}
