//! Reading-session telemetry and the on-disk formats used across the toolkit.
//!
//! Two formats live here:
//!
//! * session logs: JSON Lines, one header record followed by viewport samples;
//! * ATNT tensors: a small little-endian binary container for `f32` tensors
//!   (feature grids, heatmaps, model parameters).

mod atnt;
mod cohort;
mod session;

pub use atnt::{decode_atnt, encode_atnt, load_feature_tensor, save_feature_tensor, AtntTensor};
pub use cohort::{validate_cohort, CohortSummary, ExpertiseCounts};
pub use session::{parse_session_log, parse_session_log_with, write_session_log};

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("t_ms not strictly increasing on line {line}")]
    NonMonotonicTime { line: usize },
    #[error("session has no samples")]
    EmptySession,
    #[error("session duration is zero")]
    ZeroDuration,
    #[error("bad viewport coordinates on line {line}")]
    BadCoordinate { line: usize },
    #[error("non-positive magnification on line {line}")]
    BadMagnification { line: usize },
    #[error("grade {grade} outside domain")]
    GradeOutOfDomain { grade: i64 },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported ATNT version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported ATNT dtype {0}")]
    UnsupportedDtype(u8),
    #[error("declared size does not match payload: expected {expected} bytes, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
}

/// Reader expertise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expertise {
    Resident,
    General,
    Specialist,
}

impl Expertise {
    pub const ALL: [Expertise; 3] = [Expertise::Resident, Expertise::General, Expertise::Specialist];

    pub fn as_str(self) -> &'static str {
        match self {
            Expertise::Resident => "resident",
            Expertise::General => "general",
            Expertise::Specialist => "specialist",
        }
    }

    /// Class index for the 3-way task.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Expertise> {
        Expertise::ALL.get(i).copied()
    }
}

impl fmt::Display for Expertise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Expertise {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "resident" => Ok(Expertise::Resident),
            "general" => Ok(Expertise::General),
            "specialist" => Ok(Expertise::Specialist),
            other => Err(format!("unknown expertise '{other}'")),
        }
    }
}

/// Viewport bounding box in normalized slide coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn is_valid(&self) -> bool {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        coords.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) && self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportSample {
    pub t_ms: u64,
    pub bbox: BBox,
    pub mag: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradePair {
    pub primary: u8,
    pub secondary: u8,
    pub confidence: Option<f64>,
}

impl GradePair {
    pub fn new(primary: u8, secondary: u8) -> Self {
        GradePair {
            primary,
            secondary,
            confidence: None,
        }
    }
}

/// Admissible Gleason patterns. Defaults to {3, 4, 5}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeDomain {
    values: Vec<u8>,
}

impl GradeDomain {
    /// Builds a domain from arbitrary values; duplicates are removed.
    pub fn new(mut values: Vec<u8>) -> Option<Self> {
        values.sort_unstable();
        values.dedup();
        if values.is_empty() {
            None
        } else {
            Some(GradeDomain { values })
        }
    }

    pub fn contains(&self, grade: u8) -> bool {
        self.values.binary_search(&grade).is_ok()
    }

    pub fn min(&self) -> u8 {
        self.values[0]
    }

    pub fn max(&self) -> u8 {
        self.values[self.values.len() - 1]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Clamps `g` into `[min, max]`, then snaps it to the nearest member.
    pub fn clamp(&self, g: i64) -> u8 {
        let g = g.clamp(self.min() as i64, self.max() as i64);
        *self
            .values
            .iter()
            .min_by_key(|&&v| (v as i64 - g).abs())
            .expect("domain is non-empty")
    }
}

impl Default for GradeDomain {
    fn default() -> Self {
        GradeDomain { values: vec![3, 4, 5] }
    }
}

/// One reader's viewing of one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub pathologist_id: String,
    pub wsi_id: String,
    pub expertise: Expertise,
    samples: Vec<ViewportSample>,
    pub grade: Option<GradePair>,
}

impl Session {
    /// Validating constructor. Enforces every sample and ordering invariant.
    pub fn new(
        session_id: impl Into<String>,
        pathologist_id: impl Into<String>,
        wsi_id: impl Into<String>,
        expertise: Expertise,
        samples: Vec<ViewportSample>,
        grade: Option<GradePair>,
    ) -> Result<Self, TelemetryError> {
        if samples.is_empty() {
            return Err(TelemetryError::EmptySession);
        }
        for (i, s) in samples.iter().enumerate() {
            // header is line 1, sample i sits on line i + 2
            let line = i + 2;
            if !s.bbox.is_valid() {
                return Err(TelemetryError::BadCoordinate { line });
            }
            if !(s.mag.is_finite() && s.mag > 0.0) {
                return Err(TelemetryError::BadMagnification { line });
            }
            if i > 0 && s.t_ms <= samples[i - 1].t_ms {
                return Err(TelemetryError::NonMonotonicTime { line });
            }
        }
        let session = Session {
            session_id: session_id.into(),
            pathologist_id: pathologist_id.into(),
            wsi_id: wsi_id.into(),
            expertise,
            samples,
            grade,
        };
        if session.duration_ms() == 0 {
            return Err(TelemetryError::ZeroDuration);
        }
        Ok(session)
    }

    pub fn samples(&self) -> &[ViewportSample] {
        &self.samples
    }

    pub fn first_t(&self) -> u64 {
        self.samples[0].t_ms
    }

    pub fn duration_ms(&self) -> u64 {
        self.samples[self.samples.len() - 1].t_ms - self.samples[0].t_ms
    }

    /// Per-sample dwell: the gap to the next sample, with the last sample
    /// taking the median gap of the session.
    pub fn dwells(&self) -> Vec<f64> {
        let gaps: Vec<f64> = self
            .samples
            .windows(2)
            .map(|w| (w[1].t_ms - w[0].t_ms) as f64)
            .collect();
        let mut sorted = gaps.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let mut dwells = gaps;
        dwells.push(median);
        dwells
    }
}

/// Dense patch-feature tensor laid out `grid_h × grid_w × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self, TelemetryError> {
        let expected = grid_h * grid_w * dim;
        if grid_h == 0 || grid_w == 0 || dim == 0 || data.len() != expected {
            return Err(TelemetryError::DimMismatch {
                expected: expected * 4,
                found: data.len() * 4,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TelemetryError::NonFiniteValue(i));
        }
        Ok(FeatureGrid {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn zeros(grid_h: usize, grid_w: usize, dim: usize) -> Self {
        FeatureGrid {
            grid_h,
            grid_w,
            dim,
            data: vec![0.0; grid_h * grid_w * dim],
        }
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of the patch at `(row, col)`.
    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.grid_w + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}
