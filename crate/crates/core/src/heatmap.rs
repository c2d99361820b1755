//! Dwell-weighted attention heatmaps built from viewport footprints.

use crate::telemetry::{AtntTensor, Session, TelemetryError, ViewportSample};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatmapError {
    #[error("no samples pass the filter")]
    EmptyAfterFilter,
    #[error("degenerate map for {0:?} normalization")]
    DegenerateMap(Norm),
    #[error("grid must have at least one row and column")]
    InvalidGrid,
    #[error("invalid sample filter: {0}")]
    InvalidFilter(String),
    #[error("map values must be finite and non-negative")]
    InvalidValues,
    #[error("value count {found} does not match grid {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, found: usize },
    #[error(transparent)]
    Format(#[from] TelemetryError),
}

/// Grid over the unit slide square. Row index runs along y, column along x.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mag_level: Option<String>,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "grid must be at least 1x1");
        GridSpec {
            rows,
            cols,
            mag_level: None,
        }
    }

    pub fn with_level(rows: usize, cols: usize, level: &str) -> Self {
        GridSpec {
            mag_level: Some(level.to_string()),
            ..GridSpec::new(rows, cols)
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Cell containing the normalized point `(x, y)`; points on the far
    /// edge belong to the last cell.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let c = ((x * self.cols as f64) as usize).min(self.cols - 1);
        let r = ((y * self.rows as f64) as usize).min(self.rows - 1);
        (r, c)
    }

    /// Parses `"50x50"`.
    pub fn parse(s: &str) -> Option<GridSpec> {
        let (r, c) = s.split_once(['x', 'X'])?;
        let rows = r.trim().parse().ok().filter(|&v| v >= 1)?;
        let cols = c.trim().parse().ok().filter(|&v| v >= 1)?;
        Some(GridSpec::new(rows, cols))
    }

    /// 10×10 at 2x, 20×20 at 4x, 50×50 at 10x, 60×60 at 20x.
    pub fn for_level(level: &str) -> Option<GridSpec> {
        let n = match level {
            "2x" => 10,
            "4x" => 20,
            "10x" => 50,
            "20x" => 60,
            _ => return None,
        };
        Some(GridSpec::with_level(n, n, level))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Raw,
    UnitSum,
    MinMax,
    ZScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    grid: GridSpec,
    values: Vec<f64>,
    norm: Norm,
}

impl Heatmap {
    pub fn new(grid: GridSpec, values: Vec<f64>, norm: Norm) -> Result<Self, HeatmapError> {
        if values.len() != grid.cells() {
            return Err(HeatmapError::ShapeMismatch {
                rows: grid.rows,
                cols: grid.cols,
                found: values.len(),
            });
        }
        let ok = values
            .iter()
            .all(|v| v.is_finite() && (norm == Norm::ZScore || *v >= 0.0));
        if !ok {
            return Err(HeatmapError::InvalidValues);
        }
        Ok(Heatmap { grid, values, norm })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.cells();
        Heatmap {
            grid,
            values: vec![0.0; n],
            norm: Norm::Raw,
        }
    }

    /// Raw map from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, HeatmapError> {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        if rows.is_empty() || cols == 0 {
            return Err(HeatmapError::InvalidGrid);
        }
        Heatmap::new(GridSpec::new(rows.len(), cols), rows.concat(), Norm::Raw)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Cellwise sum of two maps on the same grid.
    pub fn add(&self, other: &Heatmap) -> Heatmap {
        assert!(self.grid.same_shape(&other.grid));
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Heatmap {
            grid: self.grid.clone(),
            values,
            norm: Norm::Raw,
        }
    }

    pub fn scaled(&self, factor: f64) -> Heatmap {
        Heatmap {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
            norm: Norm::Raw,
        }
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn to_atnt(&self) -> AtntTensor {
        AtntTensor::from_f64(&[self.grid.rows, self.grid.cols], &self.values)
    }

    /// Reads a 2-D ATNT tensor as a raw (or z-scored, if negative) map.
    pub fn from_atnt(t: &AtntTensor) -> Result<Heatmap, HeatmapError> {
        if t.dims.len() != 2 || t.dims.contains(&0) {
            return Err(HeatmapError::InvalidGrid);
        }
        let values = t.to_f64();
        let norm = if values.iter().any(|&v| v < 0.0) {
            Norm::ZScore
        } else {
            Norm::Raw
        };
        Heatmap::new(GridSpec::new(t.dims[0] as usize, t.dims[1] as usize), values, norm)
    }
}

/// Restricts which samples contribute to a map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleFilter {
    /// Keep samples with `t_ms ≤ first + fraction · duration`.
    pub time_fraction: Option<f64>,
    /// Keep samples with `lo < mag ≤ hi`.
    pub mag_bin: Option<(f64, f64)>,
}

impl SampleFilter {
    pub fn time(fraction: f64) -> Self {
        SampleFilter {
            time_fraction: Some(fraction),
            mag_bin: None,
        }
    }

    pub fn mag(lo: f64, hi: f64) -> Self {
        SampleFilter {
            time_fraction: None,
            mag_bin: Some((lo, hi)),
        }
    }

    fn validate(&self) -> Result<(), HeatmapError> {
        if let Some(f) = self.time_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(HeatmapError::InvalidFilter(format!("time fraction {f} not in (0,1]")));
            }
        }
        if let Some((lo, hi)) = self.mag_bin {
            if !(lo < hi) {
                return Err(HeatmapError::InvalidFilter(format!(
                    "empty magnification bin ({lo},{hi}]"
                )));
            }
        }
        Ok(())
    }

    fn keeps(&self, sample: &ViewportSample, first: u64, duration: u64) -> bool {
        let in_time = self
            .time_fraction
            .is_none_or(|f| (sample.t_ms - first) as f64 <= f * duration as f64);
        let in_mag = self.mag_bin.is_none_or(|(lo, hi)| lo < sample.mag && sample.mag <= hi);
        in_time && in_mag
    }
}

/// Fractional overlap of the viewport with each grid cell; the weights of
/// one sample sum to one.
pub fn footprint_weights(sample: &ViewportSample, grid: &GridSpec) -> Vec<((usize, usize), f64)> {
    let b = &sample.bbox;
    let xs = axis_weights(b.x0, b.x1, grid.cols);
    let ys = axis_weights(b.y0, b.y1, grid.rows);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &(r, wy) in &ys {
        for &(c, wx) in &xs {
            out.push(((r, c), wy * wx));
        }
    }
    out
}

/// Share of the interval `[lo, hi]` falling in each of `n` equal bins.
fn axis_weights(lo: f64, hi: f64, n: usize) -> Vec<(usize, f64)> {
    let width = hi - lo;
    let first = ((lo * n as f64).floor() as usize).min(n - 1);
    let last = ((hi * n as f64).ceil() as usize).clamp(first + 1, n);
    (first..last)
        .filter_map(|i| {
            let a = lo.max(i as f64 / n as f64);
            let b = hi.min((i + 1) as f64 / n as f64);
            (b > a).then(|| (i, (b - a) / width))
        })
        .collect()
}

fn add_footprint(values: &mut [f64], grid: &GridSpec, sample: &ViewportSample, weight: f64) {
    for ((r, c), w) in footprint_weights(sample, grid) {
        values[r * grid.cols + c] += weight * w;
    }
}

/// Dwell-weighted footprint accumulation over the samples passing `filter`.
pub fn accumulate(session: &Session, grid: &GridSpec, filter: &SampleFilter) -> Result<Heatmap, HeatmapError> {
    filter.validate()?;
    let dwells = session.dwells();
    let (first, duration) = (session.first_t(), session.duration_ms());
    let mut values = vec![0.0; grid.cells()];
    let mut kept = 0usize;
    for (sample, dwell) in session.samples().iter().zip(&dwells) {
        if filter.keeps(sample, first, duration) {
            add_footprint(&mut values, grid, sample, *dwell);
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(HeatmapError::EmptyAfterFilter);
    }
    Ok(Heatmap {
        grid: grid.clone(),
        values,
        norm: Norm::Raw,
    })
}

pub const DEFAULT_TIME_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Cumulative maps at increasing fractions of the viewing time.
pub fn temporal_stack(session: &Session, grid: &GridSpec, fractions: &[f64]) -> Result<Vec<Heatmap>, HeatmapError> {
    fractions
        .iter()
        .map(|&f| accumulate(session, grid, &SampleFilter::time(f)))
        .collect()
}

/// One magnification interval `(lo, hi]` with its own output grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagBin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub grid: GridSpec,
}

/// (1,3] → 2x, (3,7] → 4x, (7,15] → 10x, (15,30] → 20x.
pub fn default_mag_bins() -> Vec<MagBin> {
    [
        ("2x", 1.0, 3.0),
        ("4x", 3.0, 7.0),
        ("10x", 7.0, 15.0),
        ("20x", 15.0, 30.0),
    ]
    .into_iter()
    .map(|(label, lo, hi)| MagBin {
        label: label.to_string(),
        lo,
        hi,
        grid: GridSpec::for_level(label).expect("known level"),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinMap {
    pub label: String,
    pub heatmap: Heatmap,
    /// No sample fell into this bin.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnificationStack {
    pub maps: Vec<BinMap>,
    /// Samples (and their dwell mass) outside every bin.
    pub dropped_samples: usize,
    pub dropped_mass: f64,
}

pub fn magnification_stack(session: &Session, bins: &[MagBin]) -> Result<MagnificationStack, HeatmapError> {
    for (i, b) in bins.iter().enumerate() {
        if !(b.lo < b.hi) {
            return Err(HeatmapError::InvalidFilter(format!("bin {} is empty", b.label)));
        }
        for other in &bins[i + 1..] {
            if b.lo < other.hi && other.lo < b.hi {
                return Err(HeatmapError::InvalidFilter(format!(
                    "bins {} and {} overlap",
                    b.label, other.label
                )));
            }
        }
    }
    let dwells = session.dwells();
    let mut maps: Vec<BinMap> = bins
        .iter()
        .map(|b| BinMap {
            label: b.label.clone(),
            heatmap: Heatmap::zeros(b.grid.clone()),
            empty: true,
        })
        .collect();
    let mut dropped_samples = 0;
    let mut dropped_mass = 0.0;
    for (sample, dwell) in session.samples().iter().zip(&dwells) {
        match bins.iter().position(|b| b.lo < sample.mag && sample.mag <= b.hi) {
            Some(i) => {
                let target = &mut maps[i];
                add_footprint(&mut target.heatmap.values, &bins[i].grid, sample, *dwell);
                target.empty = false;
            }
            None => {
                dropped_samples += 1;
                dropped_mass += dwell;
            }
        }
    }
    Ok(MagnificationStack {
        maps,
        dropped_samples,
        dropped_mass,
    })
}

pub fn normalize(map: &Heatmap, mode: Norm) -> Result<Heatmap, HeatmapError> {
    let v = &map.values;
    let n = v.len() as f64;
    let values: Vec<f64> = match mode {
        Norm::Raw => v.clone(),
        Norm::UnitSum => {
            let s: f64 = v.iter().sum();
            if !(s > 0.0) {
                return Err(HeatmapError::DegenerateMap(mode));
            }
            v.iter().map(|x| x / s).collect()
        }
        Norm::MinMax => {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(HeatmapError::DegenerateMap(mode));
            }
            v.iter().map(|x| (x - lo) / (hi - lo)).collect()
        }
        Norm::ZScore => {
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return Err(HeatmapError::DegenerateMap(mode));
            }
            v.iter().map(|x| (x - mean) / sd).collect()
        }
    };
    Ok(Heatmap {
        grid: map.grid.clone(),
        values,
        norm: mode,
    })
}

/// Area-weighted conservative resampling onto `new_grid`; total mass is kept.
pub fn resample(map: &Heatmap, new_grid: &GridSpec) -> Heatmap {
    let src = &map.grid;
    if src.same_shape(new_grid) {
        return Heatmap {
            grid: new_grid.clone(),
            values: map.values.clone(),
            norm: map.norm,
        };
    }
    let wy = overlap_matrix(src.rows, new_grid.rows);
    let wx = overlap_matrix(src.cols, new_grid.cols);
    let mut values = vec![0.0; new_grid.cells()];
    for (r, row_w) in wy.iter().enumerate() {
        for &(nr, fy) in row_w {
            for (c, col_w) in wx.iter().enumerate() {
                let v = map.values[r * src.cols + c] * fy;
                if v == 0.0 {
                    continue;
                }
                for &(nc, fx) in col_w {
                    values[nr * new_grid.cols + nc] += v * fx;
                }
            }
        }
    }
    let norm = match map.norm {
        Norm::UnitSum => Norm::UnitSum,
        _ => Norm::Raw,
    };
    Heatmap {
        grid: new_grid.clone(),
        values,
        norm,
    }
}

/// For each of `n_src` bins, the fraction of it that lands in each of the
/// `n_dst` bins covering the same unit interval.
fn overlap_matrix(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_src)
        .map(|i| {
            let lo = i as f64 / n_src as f64;
            let hi = (i + 1) as f64 / n_src as f64;
            axis_weights(lo, hi, n_dst)
        })
        .collect()
}

/// Separable Gaussian blur, `sigma` in grid cells, kernel truncated at 3σ and
/// renormalized at the borders.
pub fn gaussian_blur(map: &Heatmap, sigma: f64) -> Heatmap {
    if !(sigma > 0.0) {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (rows, cols) = (map.grid.rows, map.grid.cols);
    let pass = |src: &[f64], along_cols: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (rr, cc) = if along_cols {
                        (r as isize, c as isize + d)
                    } else {
                        (r as isize + d, c as isize)
                    };
                    if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                        acc += w * src[rr as usize * cols + cc as usize];
                        wsum += w;
                    }
                }
                out[r * cols + c] = acc / wsum;
            }
        }
        out
    };
    let values = pass(&pass(&map.values, true), false);
    Heatmap {
        grid: map.grid.clone(),
        values,
        norm: Norm::Raw,
    }
}
