//! Saliency comparison metrics: CC, NSS and KL divergence.

use crate::heatmap::{GridSpec, Heatmap};
use crate::telemetry::Session;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MetricError {
    #[error("map is constant")]
    DegenerateMap,
    #[error("maps are on different grids")]
    GridMismatch,
    #[error("no fixations")]
    EmptyFixations,
    #[error("fixation ({row},{col}) outside the grid")]
    OutOfBounds { row: usize, col: usize },
    #[error("map has no positive mass")]
    ZeroMap,
    #[error("map has negative values")]
    NegativeValues,
}

/// Grid cells under the viewport centers of a session.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fixations {
    pub cells: Vec<(usize, usize)>,
}

impl Fixations {
    pub fn new(cells: Vec<(usize, usize)>) -> Self {
        Fixations { cells }
    }

    pub fn from_session(session: &Session, grid: &GridSpec) -> Self {
        let cells = session
            .samples()
            .iter()
            .map(|s| {
                let (x, y) = s.bbox.center();
                grid.cell_of(x, y)
            })
            .collect();
        Fixations { cells }
    }

    /// Cells where `mask > 0.5`.
    pub fn from_mask(mask: &Heatmap) -> Self {
        let cols = mask.grid().cols;
        let cells = mask
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| (i / cols, i % cols))
            .collect();
        Fixations { cells }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Reads `row,col` lines; blank lines and a `row,col` header are skipped.
    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut cells = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.eq_ignore_ascii_case("row,col") {
                continue;
            }
            let (r, c) = line
                .split_once(',')
                .ok_or_else(|| format!("line {}: expected row,col", i + 1))?;
            let r = r.trim().parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            let c = c.trim().parse().map_err(|e| format!("line {}: {e}", i + 1))?;
            cells.push((r, c));
        }
        Ok(Fixations { cells })
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation of two equally sized slices (population moments).
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::GridMismatch);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(MetricError::DegenerateMap);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Linear correlation coefficient between two maps.
pub fn cc(a: &Heatmap, b: &Heatmap) -> Result<f64, MetricError> {
    if !a.grid().same_shape(b.grid()) {
        return Err(MetricError::GridMismatch);
    }
    pearson(a.values(), b.values())
}

/// Normalized scanpath saliency: mean z-scored map value over `fix`.
pub fn nss(map: &Heatmap, fix: &Fixations) -> Result<f64, MetricError> {
    if fix.is_empty() {
        return Err(MetricError::EmptyFixations);
    }
    let g = map.grid();
    if let Some(&(row, col)) = fix.cells.iter().find(|(r, c)| *r >= g.rows || *c >= g.cols) {
        return Err(MetricError::OutOfBounds { row, col });
    }
    let (mean, sd) = mean_std(map.values());
    if !(sd > 0.0) {
        return Err(MetricError::DegenerateMap);
    }
    let total: f64 = fix.cells.iter().map(|&(r, c)| (map.get(r, c) - mean) / sd).sum();
    Ok(total / fix.cells.len() as f64)
}

pub const KLD_EPS: f64 = 1e-8;

fn floored_distribution(v: &[f64], eps: f64) -> Result<Vec<f64>, MetricError> {
    if v.iter().any(|&x| x < 0.0) {
        return Err(MetricError::NegativeValues);
    }
    let s: f64 = v.iter().sum();
    if !(s > 0.0) {
        return Err(MetricError::ZeroMap);
    }
    let floored: Vec<f64> = v.iter().map(|x| (x / s).max(eps)).collect();
    let fs: f64 = floored.iter().sum();
    Ok(floored.into_iter().map(|x| x / fs).collect())
}

/// KL(P‖Q) in nats after unit-sum normalization, an `eps` floor and
/// renormalization of both maps.
pub fn kld(p: &Heatmap, q: &Heatmap, eps: f64) -> Result<f64, MetricError> {
    if !p.grid().same_shape(q.grid()) {
        return Err(MetricError::GridMismatch);
    }
    let p = floored_distribution(p.values(), eps)?;
    let q = floored_distribution(q.values(), eps)?;
    let d: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum();
    Ok(d.max(0.0))
}

/// Which way round KL divergence is taken between ground truth and prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    #[default]
    GtToPred,
    PredToGt,
}

pub fn kld_directed(gt: &Heatmap, pred: &Heatmap, dir: KldDirection, eps: f64) -> Result<f64, MetricError> {
    match dir {
        KldDirection::GtToPred => kld(gt, pred, eps),
        KldDirection::PredToGt => kld(pred, gt, eps),
    }
}

/// All three metrics for one prediction; each may independently be undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyScores {
    pub cc: Result<f64, MetricError>,
    pub nss: Result<f64, MetricError>,
    pub kld: Result<f64, MetricError>,
}

/// Scores an attention map against a tumor mask rasterized on the same grid.
///
/// NSS uses the mask cells above 0.5 as fixations; KL divergence treats the
/// mask as the reference distribution.
pub fn eval_against_mask(map: &Heatmap, mask: &Heatmap) -> SaliencyScores {
    SaliencyScores {
        cc: cc(map, mask),
        nss: nss(map, &Fixations::from_mask(mask)),
        kld: kld(mask, map, KLD_EPS),
    }
}
