use crate::error::{CliError, Kind, Result};
use crate::{fsio, svg, Ctx};
use attnscope::analysis::pearson_with_p;
use std::fmt::Write;
use std::path::Path;

const TABLES: [(&str, &str); 3] = [
    ("table1.csv", "Predicted attention vs reader attention"),
    ("table2.csv", "Predicted attention vs ROI masks"),
    ("table3.csv", "Expertise classification"),
];

fn markdown_table(csv_text: &str) -> Result<String> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(csv_text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for rec in r.records() {
        let rec = rec?;
        let _ = writeln!(s, "| {} |", rec.iter().collect::<Vec<_>>().join(" | "));
    }
    Ok(s)
}

struct Point {
    expertise: String,
    x: f64,
    y: f64,
}

fn read_points(text: &str) -> Result<Vec<Point>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let h = r.headers()?.clone();
    let col = |name: &str| {
        h.iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::data(format!("agreement_points.csv lacks {name}")))
    };
    let (e, x, y) = (col("expertise")?, col("attn_agreement")?, col("grade_concordance")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| CliError::data(format!("agreement_points.csv: bad number {:?}", &rec[i])))
        };
        out.push(Point {
            expertise: rec[e].to_string(),
            x: num(x)?,
            y: num(y)?,
        });
    }
    Ok(out)
}

fn agreement_section(points: &[Point], md: &mut String) -> String {
    let mut groups: Vec<&str> = points.iter().map(|p| p.expertise.as_str()).collect();
    groups.sort_by_key(|g| {
        attnscope::Expertise::ALL
            .iter()
            .position(|e| e.as_str() == *g)
            .unwrap_or(usize::MAX)
    });
    groups.dedup();
    md.push_str("## Attention agreement vs grade concordance\n\n![agreement](agreement.svg)\n\n");
    md.push_str("| expertise | n | r | p | slope |\n|---|---|---|---|---|\n");
    let mut series = Vec::new();
    for g in groups {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().filter(|p| p.expertise == g).map(|p| (p.x, p.y)).unzip();
        let fit = pearson_with_p(&xs, &ys).ok();
        match &fit {
            Some(f) => {
                let _ = writeln!(md, "| {g} | {} | {:.3} | {:.4} | {:.3} |", xs.len(), f.r, f.p, f.slope);
            }
            None => {
                let _ = writeln!(md, "| {g} | {} | | | |", xs.len());
            }
        }
        series.push(svg::Series {
            label: match &fit {
                Some(f) => format!("{g} (r={:.2}, p={:.3})", f.r, f.p),
                None => g.to_string(),
            },
            points: xs.into_iter().zip(ys).collect(),
            line: fit.map(|f| (f.slope, f.intercept)),
        });
    }
    md.push('\n');
    svg::scatter_svg(
        "Attention agreement vs grade concordance",
        "attention agreement (CC)",
        "grade concordance",
        &series,
    )
}

/// Collects tables, agreement points and predicted maps from `run` into a
/// markdown summary plus SVG figures. Output goes to `--out`, or `run/report`.
pub fn report(ctx: &Ctx, run: &Path) -> Result<()> {
    if !run.is_dir() {
        return Err(CliError::new(
            Kind::MissingInputs,
            format!("{}: not a directory", run.display()),
        ));
    }
    let out = ctx.out.clone().unwrap_or_else(|| run.join("report"));
    let mut md = String::from("# attnscope report\n\n");
    let mut found = 0;

    let manifest = run.join("run_manifest.json");
    if manifest.is_file() {
        let v: serde_json::Value = fsio::read_json(&manifest)?;
        let _ = writeln!(
            md,
            "- task: {}\n- seed: {}\n- config hash: {}\n",
            v["task"], v["seed"], v["config_hash"]
        );
    }

    let points = run.join("agreement_points.csv");
    if points.is_file() {
        let pts = read_points(&fsio::read_string(&points)?)?;
        fsio::write(&out.join("agreement.svg"), agreement_section(&pts, &mut md))?;
        found += 1;
    }

    for (file, title) in TABLES {
        let p = run.join(file);
        if p.is_file() {
            let text = fsio::read_string(&p)?;
            let _ = write!(md, "## {title}\n\n{}\n", markdown_table(&text)?);
            fsio::write(&out.join(file), text)?;
            found += 1;
        }
    }

    let maps = run.join("maps");
    if maps.is_dir() {
        let files = fsio::list(&maps, "atnt")?;
        if !files.is_empty() {
            md.push_str("## Predicted maps\n\n");
            for p in files {
                let name = fsio::stem(&p);
                let map = fsio::load_heatmap(&p)?;
                let cell = (400 / map.grid().cols.max(1)).clamp(2, 16);
                fsio::write(
                    &out.join("maps").join(format!("{name}.svg")),
                    svg::heatmap_svg(&map, cell, &name),
                )?;
                let _ = writeln!(md, "- ![{name}](maps/{name}.svg)");
            }
            md.push('\n');
            found += 1;
        }
    }

    if found == 0 {
        return Err(CliError::new(
            Kind::MissingInputs,
            format!(
                "{}: no agreement_points.csv, table CSVs or maps/ to report on",
                run.display()
            ),
        ));
    }
    fsio::write(&out.join("summary.md"), md)?;
    ctx.log(format!("report written to {}", out.display()));
    Ok(())
}
