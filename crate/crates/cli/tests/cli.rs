use attnscope::telemetry::encode_atnt;
use attnscope::{GridSpec, Heatmap, Norm};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attnscope(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnscope"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ATTNSCOPE_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("json error line");
    serde_json::from_str(line).unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is json")
}

/// Small cohort in `dir/sim`.
fn simulate(dir: &Path) {
    fs::write(
        dir.join("cohort.json"),
        r#"{"n_slides": 4, "readers_per_group": 3, "seed": 5}"#,
    )
    .unwrap();
    let o = attnscope(&["simulate", "--config", "cohort.json", "--out", "sim", "--quiet"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = attnscope(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(stderr_json(&o)["error"], "usage");
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_attnscope"))
        .args(["report", "--run", "."])
        .current_dir(dir.path())
        .env("ATTNSCOPE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_then_agree_reports_three_groups() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    assert_eq!(fs::read_dir(d.join("sim/sessions")).unwrap().count(), 36);
    assert_eq!(fs::read_dir(d.join("sim/masks")).unwrap().count(), 4);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("sim/cohort.json")).unwrap()).unwrap();
    assert_eq!(manifest["sessions"].as_array().unwrap().len(), 36);
    assert_eq!(manifest["config"]["seed"], 5);

    // the simulate output root is accepted as well as its sessions/ directory
    let o = attnscope(
        &[
            "agree",
            "--sessions",
            "sim",
            "--grid",
            "20x20",
            "--out",
            "agr",
            "--quiet",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let groups: Vec<&str> = v["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["expertise"].as_str().unwrap())
        .collect();
    assert_eq!(groups, ["resident", "general", "specialist"]);
    let points = fs::read_to_string(d.join("agr/agreement_points.csv")).unwrap();
    assert_eq!(points.lines().count(), 1 + 12);
    assert!(points.starts_with("wsi_id,expertise,n_readers,attn_agreement,grade_concordance\n"));
    assert!(d.join("agr/agreement.svg").is_file());
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    let o = attnscope(&["simulate", "--config", "cohort.json", "--out", "again", "--quiet"], d);
    assert_eq!(code(&o), 0);
    let o = attnscope(
        &[
            "simulate",
            "--config",
            "cohort.json",
            "--seed",
            "6",
            "--out",
            "other",
            "--quiet",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    let name = "sessions/s000-resident-0.jsonl";
    let a = fs::read(d.join("sim").join(name)).unwrap();
    assert_eq!(a, fs::read(d.join("again").join(name)).unwrap());
    assert_ne!(a, fs::read(d.join("other").join(name)).unwrap());
}

#[test]
fn heatmap_then_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    let o = attnscope(
        &[
            "heatmap",
            "--session",
            "sim/sessions/s001-specialist-1.jsonl",
            "--grid",
            "30x30",
            "--norm",
            "min-max",
            "--out",
            "m.atnt",
            "--svg",
            "--quiet",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(d.join("m.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), 900);

    let o = attnscope(&["metrics", "--pred", "m.atnt", "--gt", "m.atnt"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("cc,nss,kld"));
    let v: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((v[0] - 1.0).abs() < 1e-9);
    assert!(v[1] > 0.0);
    assert!(v[2].abs() < 1e-9);
}

#[test]
fn flat_prediction_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grid = GridSpec::new(4, 4);
    let flat = Heatmap::new(grid.clone(), vec![0.5; 16], Norm::Raw).unwrap();
    let mut v = vec![0.0; 16];
    v[5] = 1.0;
    let gt = Heatmap::new(grid, v, Norm::Raw).unwrap();
    fs::write(d.join("flat.atnt"), encode_atnt(&flat.to_atnt())).unwrap();
    fs::write(d.join("gt.atnt"), encode_atnt(&gt.to_atnt())).unwrap();
    let o = attnscope(&["metrics", "--pred", "flat.atnt", "--gt", "gt.atnt"], d);
    assert_eq!(code(&o), 4);
    assert_eq!(stderr_json(&o)["error"], "numeric");
    // cc and nss need spread in the prediction; KL(one-hot || uniform) is ln 16 up to the eps floor
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..2], ["", ""]);
    assert!((row[2].parse::<f64>().unwrap() - 16f64.ln()).abs() < 1e-5);
}

#[test]
fn malformed_session_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("s")).unwrap();
    fs::write(d.join("s/bad.jsonl"), "{not json}\n").unwrap();
    let o = attnscope(&["ingest", "--sessions", "s"], d);
    assert_eq!(code(&o), 3);
    let err = stderr_json(&o);
    assert_eq!(err["error"], "data");
    assert!(err["message"].as_str().unwrap().contains("bad.jsonl"));
}

#[test]
fn report_on_empty_run_fails_with_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = attnscope(&["report", "--run", "."], dir.path());
    assert_eq!(code(&o), 3);
    assert_eq!(stderr_json(&o)["error"], "missing_inputs");
}

#[test]
fn train_eval_report_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    fs::write(
        d.join("exp.json"),
        r#"{"task": "attention", "sessions": "sim/sessions", "features": "sim/features", "masks": "sim/masks",
            "k": 2, "seed": 1,
            "hyper": {"epochs": 2, "lr": 0.001},
            "attention": {"levels": ["2x"], "layers": 1, "heads": 2, "mlp_ratio": 2}}"#,
    )
    .unwrap();
    for out in ["run_a", "run_b"] {
        let o = attnscope(&["train", "--config", "exp.json", "--out", out, "--quiet"], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let table = fs::read_to_string(d.join("run_a/table1.csv")).unwrap();
    assert_eq!(table, fs::read_to_string(d.join("run_b/table1.csv")).unwrap());
    assert_eq!(table.lines().count(), 1 + 3);
    assert_eq!(
        fs::read_to_string(d.join("run_a/table2.csv")).unwrap().lines().count(),
        1 + 3
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("run_a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["fold_seeds"], serde_json::json!([1, 2]));
    assert!(d.join("run_a/fold_2/2x/manifest.json").is_file());

    let o = attnscope(
        &[
            "eval",
            "--checkpoint",
            "run_a/fold_1/2x",
            "--features",
            "sim/features",
            "--sessions",
            "sim/sessions",
            "--masks",
            "sim/masks",
            "--out",
            "ev",
            "--quiet",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(d.join("ev/maps")).unwrap().count(), 4);
    assert!(d.join("ev/table1.csv").is_file() && d.join("ev/table2.csv").is_file());

    let o = attnscope(
        &[
            "agree",
            "--sessions",
            "sim/sessions",
            "--grid",
            "20x20",
            "--out",
            "ev",
            "--quiet",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    for out in ["rep1", "rep2"] {
        let o = attnscope(&["report", "--run", "ev", "--out", out, "--quiet"], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let svg = fs::read(d.join("rep1/agreement.svg")).unwrap();
    assert_eq!(svg, fs::read(d.join("rep2/agreement.svg")).unwrap());
    assert_eq!(
        fs::read(d.join("rep1/summary.md")).unwrap(),
        fs::read(d.join("rep2/summary.md")).unwrap()
    );
}
