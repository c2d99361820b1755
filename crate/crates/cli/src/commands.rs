use crate::error::{CliError, Kind, Result};
use crate::{fsio, svg, Ctx};
use attnscope::analysis::{expertise_agreement_report, AgreementReport};
use attnscope::heatmap::{accumulate, gaussian_blur, normalize, SampleFilter};
use attnscope::metrics::{cc, kld_directed, nss, Fixations, KldDirection, MetricError, KLD_EPS};
use attnscope::synth::{generate_cohort, CohortConfig};
use attnscope::telemetry::{save_feature_tensor, validate_cohort, write_session_log};
use attnscope::{Expertise, GradeDomain, GridSpec, Norm};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::Path;

pub fn parse_grid(s: &str) -> Result<GridSpec> {
    GridSpec::parse(s).or_else(|| GridSpec::for_level(s)).ok_or_else(|| {
        CliError::usage(format!(
            "bad grid {s:?}; expected RxC (e.g. 50x50) or a level (2x/4x/10x/20x)"
        ))
    })
}

pub fn parse_grades(s: &str) -> Result<GradeDomain> {
    let values: Vec<u8> = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad grade {v:?}")))
        })
        .collect::<Result<_>>()?;
    GradeDomain::new(values).ok_or_else(|| CliError::usage("grade list must not be empty"))
}

pub fn level_label(grid: &GridSpec) -> String {
    grid.mag_level
        .clone()
        .unwrap_or_else(|| format!("{}x{}", grid.rows, grid.cols))
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    let mut config: CohortConfig = match &ctx.config {
        Some(p) => fsio::read_json(p)?,
        None => CohortConfig::default(),
    };
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    let out = ctx.out_dir()?;
    ctx.log(format!(
        "generating {} slides x {} readers per group",
        config.n_slides, config.readers_per_group
    ));
    let cohort = generate_cohort(&config)?;

    for s in &cohort.sessions {
        fsio::write(
            &out.join("sessions").join(format!("{}.jsonl", s.session_id)),
            write_session_log(s),
        )?;
    }
    let mut slides = Vec::new();
    for slide in &cohort.slides {
        for f in &slide.features {
            let grid = config
                .slide
                .feature_grids
                .iter()
                .find(|g| g.rows == f.grid_h() && g.cols == f.grid_w())
                .expect("features follow the slide spec grids");
            fsio::write(
                &fsio::feature_path(&out.join("features"), &slide.wsi_id, &level_label(grid)),
                save_feature_tensor(f),
            )?;
        }
        fsio::save_heatmap(
            &out.join("masks").join(format!("{}.atnt", slide.wsi_id)),
            &slide.roi_mask,
        )?;
        slides.push(json!({
            "wsi_id": slide.wsi_id,
            "true_grade": slide.true_grade,
            "difficulty": slide.difficulty,
            "mask_fraction": slide.mask_fraction(),
        }));
    }
    let counts: BTreeMap<&str, usize> = cohort.counts().into_iter().map(|(e, n)| (e.as_str(), n)).collect();
    let sessions: Vec<&str> = cohort.sessions.iter().map(|s| s.session_id.as_str()).collect();
    fsio::write_json(
        &out.join("cohort.json"),
        &json!({
            "config": config,
            "layout": {
                "sessions": "sessions/<session_id>.jsonl",
                "features": "features/<wsi>_<level>.atnt",
                "masks": "masks/<wsi>.atnt",
            },
            "counts": counts,
            "slides": slides,
            "sessions": sessions,
        }),
    )?;
    fsio::print_json(&json!({ "slides": cohort.slides.len(), "sessions": counts, "out": out }));
    Ok(())
}

pub fn ingest(ctx: &Ctx, sessions: &Path, features: Option<&Path>) -> Result<()> {
    let loaded = fsio::load_sessions(sessions)?;
    ctx.log(format!("{} sessions parsed", loaded.len()));
    let summary = validate_cohort(&loaded);
    let mut value = serde_json::to_value(&summary).map_err(|e| CliError::data(e.to_string()))?;
    if let Some(dir) = features {
        let mut per_level: BTreeMap<String, usize> = BTreeMap::new();
        let mut dims: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
        for p in fsio::list(dir, "atnt")? {
            let f = fsio::load_features(&p)?;
            let stem = fsio::stem(&p);
            let level = fsio::split_feature_stem(&stem)
                .map_or("unknown", |(_, l)| l)
                .to_string();
            let shape = (f.grid_h(), f.grid_w(), f.dim());
            if let Some(&prev) = dims.get(&level) {
                if prev != shape {
                    return Err(CliError::data(format!(
                        "{}: shape {shape:?} differs from {prev:?}",
                        p.display()
                    )));
                }
            }
            dims.insert(level.clone(), shape);
            *per_level.entry(level).or_default() += 1;
        }
        value["features"] = json!(per_level);
    }
    if let Some(out) = &ctx.out {
        fsio::write_json(&out.join("cohort_summary.json"), &value)?;
    }
    fsio::print_json(&value);
    Ok(())
}

pub struct HeatmapOpts {
    pub grid: String,
    pub time_fraction: Option<f64>,
    pub mag: Option<String>,
    pub blur: Option<f64>,
    pub norm: Norm,
    pub svg: bool,
}

fn parse_mag(s: &str) -> Result<(f64, f64)> {
    let bad = || CliError::usage(format!("bad --mag {s:?}; expected lo,hi"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn heatmap(ctx: &Ctx, session: &Path, opts: &HeatmapOpts) -> Result<()> {
    let out = ctx
        .out
        .as_ref()
        .ok_or_else(|| CliError::usage("--out FILE is required"))?;
    let grid = parse_grid(&opts.grid)?;
    let filter = SampleFilter {
        time_fraction: opts.time_fraction,
        mag_bin: opts.mag.as_deref().map(parse_mag).transpose()?,
    };
    let s = fsio::load_session(session)?;
    let mut map = accumulate(&s, &grid, &filter)?;
    if let Some(sigma) = opts.blur {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(CliError::usage("--blur must be a non-negative number"));
        }
        map = gaussian_blur(&map, sigma);
    }
    let map = normalize(&map, opts.norm)?;
    fsio::save_heatmap(out, &map)?;
    if opts.svg {
        fsio::write(&out.with_extension("svg"), svg::heatmap_svg(&map, 8, &s.session_id))?;
    }
    ctx.log(format!("wrote {}", out.display()));
    fsio::print_json(&json!({
        "session_id": s.session_id,
        "rows": grid.rows,
        "cols": grid.cols,
        "sum": map.sum(),
        "norm": map.norm(),
    }));
    Ok(())
}

pub fn metrics(ctx: &Ctx, pred: &Path, gt: &Path, fixations: Option<&Path>, dir: KldDirection) -> Result<()> {
    let p = fsio::load_heatmap(pred)?;
    let g = fsio::load_heatmap(gt)?;
    let fix = match fixations {
        Some(f) => Fixations::parse_csv(&fsio::read_string(f)?).map_err(|e| CliError::data(e).at(f))?,
        None => Fixations::from_mask(&g),
    };
    let results: [(&str, std::result::Result<f64, MetricError>); 3] = [
        ("cc", cc(&p, &g)),
        ("nss", nss(&p, &fix)),
        ("kld", kld_directed(&g, &p, dir, KLD_EPS)),
    ];
    let mut value = json!({ "kld_direction": match dir {
        KldDirection::GtToPred => "gt_to_pred",
        KldDirection::PredToGt => "pred_to_gt",
    }});
    let mut first_err = None;
    for (name, r) in &results {
        match r {
            Ok(v) => value[*name] = json!(v),
            Err(e) => {
                value[*name] = serde_json::Value::Null;
                value["undefined"][*name] = json!(e.to_string());
                first_err.get_or_insert(*e);
            }
        }
    }
    let row: Vec<String> = results
        .iter()
        .map(|(_, r)| r.map(|v| format!("{v:.9}")).unwrap_or_default())
        .collect();
    let csv = format!("cc,nss,kld\n{}\n", row.join(","));
    if let Some(out) = &ctx.out {
        fsio::write_json(&out.join("metrics.json"), &value)?;
        fsio::write(&out.join("metrics.csv"), &csv)?;
    }
    print!("{csv}");
    if let Some(u) = value.get("undefined") {
        ctx.log(format!("undefined metrics: {u}"));
    }
    match first_err {
        Some(e) => Err(CliError::from(e)),
        None => Ok(()),
    }
}

pub fn write_agreement(out: &Path, report: &AgreementReport) -> Result<()> {
    let rows = report
        .points
        .iter()
        .map(|p| {
            vec![
                p.wsi_id.clone(),
                p.expertise.as_str().to_string(),
                p.n_readers.to_string(),
                format!("{:.6}", p.attn_agreement),
                format!("{:.6}", p.grade_concordance),
            ]
        })
        .collect();
    fsio::write(
        &out.join("agreement_points.csv"),
        csv_bytes(
            &[
                "wsi_id",
                "expertise",
                "n_readers",
                "attn_agreement",
                "grade_concordance",
            ],
            rows,
        )?,
    )?;
    let rows = report
        .groups
        .iter()
        .map(|g| {
            vec![
                g.expertise.as_str().to_string(),
                g.n_points.to_string(),
                opt(g.mean_agreement),
                opt(g.mean_concordance),
                opt(g.fit.as_ref().map(|f| f.r)),
                opt(g.fit.as_ref().map(|f| f.p)),
                opt(g.fit.as_ref().map(|f| f.slope)),
                opt(g.fit.as_ref().map(|f| f.intercept)),
            ]
        })
        .collect();
    fsio::write(
        &out.join("agreement_groups.csv"),
        csv_bytes(
            &[
                "expertise",
                "n_points",
                "mean_agreement",
                "mean_concordance",
                "r",
                "p",
                "slope",
                "intercept",
            ],
            rows,
        )?,
    )?;
    fsio::write(&out.join("agreement.svg"), agreement_svg(report))
}

pub fn agreement_svg(report: &AgreementReport) -> String {
    let series: Vec<svg::Series> = Expertise::ALL
        .iter()
        .map(|&e| {
            let g = report.groups.iter().find(|g| g.expertise == e);
            let fit = g.and_then(|g| g.fit.as_ref());
            svg::Series {
                label: match fit {
                    Some(f) => format!("{} (r={:.2}, p={:.3})", e.as_str(), f.r, f.p),
                    None => e.as_str().to_string(),
                },
                points: report
                    .points
                    .iter()
                    .filter(|p| p.expertise == e)
                    .map(|p| (p.attn_agreement, p.grade_concordance))
                    .collect(),
                line: fit.map(|f| (f.slope, f.intercept)),
            }
        })
        .collect();
    svg::scatter_svg(
        "Attention agreement vs grade concordance",
        "attention agreement (CC)",
        "grade concordance",
        &series,
    )
}

pub fn agree(ctx: &Ctx, sessions: &Path, grid: &str, grades: &str) -> Result<()> {
    let grid = parse_grid(grid)?;
    let domain = parse_grades(grades)?;
    let loaded = fsio::load_sessions(sessions)?;
    ctx.log(format!("{} sessions parsed", loaded.len()));
    let report = expertise_agreement_report(&loaded, &grid, &domain);
    if report.points.is_empty() {
        return Err(CliError::new(
            Kind::Data,
            "no slide has two graded readers of the same expertise; nothing to compare",
        ));
    }
    if let Some(out) = &ctx.out {
        write_agreement(out, &report)?;
        fsio::write_json(&out.join("agreement_report.json"), &report)?;
    }
    fsio::print_json(&json!({ "groups": report.groups, "skipped": report.skipped }));
    Ok(())
}
