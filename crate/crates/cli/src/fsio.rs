use crate::error::{CliError, Result};
use attnscope::heatmap::HeatmapError;
use attnscope::telemetry::{decode_atnt, encode_atnt, load_feature_tensor, parse_session_log, FeatureGrid};
use attnscope::{Heatmap, Session};
use std::fs;
use std::path::{Path, PathBuf};

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Writes `bytes`, creating parent directories.
pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    s.push('\n');
    write(path, s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| CliError::data(e.to_string()).at(path))
}

/// Files in `dir` with the given extension, sorted by name.
pub fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_session(path: &Path) -> Result<Session> {
    parse_session_log(&read(path)?).map_err(|e| CliError::from(e).at(path))
}

/// Every `*.jsonl` session log in `dir`, or in `dir/sessions` when `dir`
/// has none (the layout `simulate` writes). Fails on the first invalid file.
pub fn load_sessions(dir: &Path) -> Result<Vec<Session>> {
    let mut files = list(dir, "jsonl")?;
    let nested = dir.join("sessions");
    if files.is_empty() && nested.is_dir() {
        files = list(&nested, "jsonl")?;
    }
    if files.is_empty() {
        return Err(CliError::data(format!("{}: no .jsonl session logs", dir.display())));
    }
    files.iter().map(|p| load_session(p)).collect()
}

pub fn load_heatmap(path: &Path) -> Result<Heatmap> {
    let t = decode_atnt(&read(path)?).map_err(|e| CliError::from(e).at(path))?;
    Heatmap::from_atnt(&t).map_err(|e: HeatmapError| CliError::from(e).at(path))
}

pub fn save_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    write(path, encode_atnt(&map.to_atnt()))
}

pub fn load_features(path: &Path) -> Result<FeatureGrid> {
    load_feature_tensor(&read(path)?).map_err(|e| CliError::from(e).at(path))
}

/// Feature files follow `<wsi>_<level>.atnt`.
pub fn feature_path(dir: &Path, wsi: &str, level: &str) -> PathBuf {
    dir.join(format!("{wsi}_{level}.atnt"))
}

/// Splits a feature file stem into `(wsi, level)` at the last underscore.
pub fn split_feature_stem(stem: &str) -> Option<(&str, &str)> {
    stem.rsplit_once('_').filter(|(w, l)| !w.is_empty() && !l.is_empty())
}

/// Pretty JSON on stdout. A closed pipe is not an error.
pub fn print_json(value: &impl serde::Serialize) {
    use std::io::Write;
    let s = serde_json::to_string_pretty(value).expect("values serialize");
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}
