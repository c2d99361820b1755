//! Synthetic slides, patch features and expertise-conditioned reading
//! sessions, so every stage can run end to end without clinical data.
//!
//! Each slide carries a binary region-of-interest mask and a difficulty in
//! `[0, 1]`. Readers jump to the ROI with probability `roi_affinity`,
//! otherwise wander; harder slides lower that probability and widen grading
//! noise for every group alike.

use crate::heatmap::{resample, GridSpec, Heatmap, Norm};
use crate::telemetry::{BBox, Expertise, FeatureGrid, GradeDomain, GradePair, Session, ViewportSample};
use crate::util::derive_seed;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid profile for {0}: {1}")]
    InvalidProfile(Expertise, String),
    #[error("profiles must satisfy specialist > general > resident ROI affinity and a lowest specialist grade noise")]
    InvalidProfileOrder,
    #[error("invalid slide spec: {0}")]
    InvalidSpec(String),
}

/// Nominal magnification per bin (2x, 4x, 10x, 20x), jittered ±10 %.
pub const NOMINAL_MAGS: [f64; 4] = [2.0, 4.0, 10.0, 20.0];

/// Reading behaviour of one expertise group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseProfile {
    pub roi_affinity: f64,
    /// Probability of each magnification bin, in [`NOMINAL_MAGS`] order.
    pub mag_mix: [f64; 4],
    /// Standard deviation of a wandering step, in slide units.
    pub step_scale: f64,
    pub dwell_ms: f64,
    pub grade_noise_sd: f64,
    pub n_samples: usize,
}

impl ExpertiseProfile {
    pub fn default_for(e: Expertise) -> Self {
        match e {
            Expertise::Resident => ExpertiseProfile {
                roi_affinity: 0.4,
                mag_mix: [0.8, 0.12, 0.05, 0.03],
                step_scale: 0.15,
                dwell_ms: 400.0,
                grade_noise_sd: 0.7,
                n_samples: 60,
            },
            Expertise::General => ExpertiseProfile {
                roi_affinity: 0.6,
                mag_mix: [0.08, 0.8, 0.08, 0.04],
                step_scale: 0.1,
                dwell_ms: 300.0,
                grade_noise_sd: 0.5,
                n_samples: 60,
            },
            Expertise::Specialist => ExpertiseProfile {
                roi_affinity: 0.85,
                mag_mix: [0.03, 0.05, 0.22, 0.7],
                step_scale: 0.07,
                dwell_ms: 250.0,
                grade_noise_sd: 0.2,
                n_samples: 200,
            },
        }
    }

    pub fn validate(&self, e: Expertise) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidProfile(e, m.to_string()));
        if !(0.0..=1.0).contains(&self.roi_affinity) {
            return bad("roi_affinity must lie in [0, 1]");
        }
        if self.mag_mix.iter().any(|&p| !(p >= 0.0)) || (self.mag_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mag_mix must be non-negative and sum to 1");
        }
        if !(self.step_scale > 0.0 && self.dwell_ms >= 1.0 && self.grade_noise_sd >= 0.0) {
            return bad("step_scale and dwell_ms must be positive, grade_noise_sd non-negative");
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2");
        }
        Ok(())
    }
}

/// One profile per expertise group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    pub resident: ExpertiseProfile,
    pub general: ExpertiseProfile,
    pub specialist: ExpertiseProfile,
}

impl Default for Profiles {
    fn default() -> Self {
        Profiles {
            resident: ExpertiseProfile::default_for(Expertise::Resident),
            general: ExpertiseProfile::default_for(Expertise::General),
            specialist: ExpertiseProfile::default_for(Expertise::Specialist),
        }
    }
}

impl Profiles {
    pub fn get(&self, e: Expertise) -> &ExpertiseProfile {
        match e {
            Expertise::Resident => &self.resident,
            Expertise::General => &self.general,
            Expertise::Specialist => &self.specialist,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for e in Expertise::ALL {
            self.get(e).validate(e)?;
        }
        let (r, g, s) = (&self.resident, &self.general, &self.specialist);
        let affinity_ok = s.roi_affinity > g.roi_affinity && g.roi_affinity > r.roi_affinity;
        let noise_ok = s.grade_noise_sd < g.grade_noise_sd && s.grade_noise_sd < r.grade_noise_sd;
        if !(affinity_ok && noise_ok) {
            return Err(SynthError::InvalidProfileOrder);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideSpec {
    /// Grid of the ROI mask.
    pub mask_grid: GridSpec,
    /// One feature grid is generated per entry.
    pub feature_grids: Vec<GridSpec>,
    pub roi_count: usize,
    pub feature_dim: usize,
    pub noise_sd: f64,
    /// Accepted range of the ROI area fraction when `roi_count > 0`.
    pub mask_fraction: (f64, f64),
}

impl Default for SlideSpec {
    fn default() -> Self {
        SlideSpec {
            mask_grid: GridSpec::for_level("20x").expect("known level"),
            feature_grids: ["2x", "4x", "10x", "20x"]
                .iter()
                .map(|l| GridSpec::for_level(l).expect("known level"))
                .collect(),
            roi_count: 2,
            feature_dim: 8,
            noise_sd: 0.1,
            mask_fraction: (0.05, 0.3),
        }
    }
}

impl SlideSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.mask_grid.cells() == 0 || self.feature_grids.iter().any(|g| g.cells() == 0) {
            return Err(SynthError::InvalidSpec("grids must be non-empty".into()));
        }
        if self.feature_dim == 0 || !(self.noise_sd >= 0.0) {
            return Err(SynthError::InvalidSpec(
                "feature_dim must be positive and noise_sd non-negative".into(),
            ));
        }
        let (lo, hi) = self.mask_fraction;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(SynthError::InvalidSpec(
                "mask_fraction must be an increasing pair in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub wsi_id: String,
    /// Binary ROI mask on the spec's mask grid.
    pub roi_mask: Heatmap,
    /// Feature grids in the order of `SlideSpec::feature_grids`.
    pub features: Vec<FeatureGrid>,
    pub true_grade: GradePair,
    pub difficulty: f64,
}

impl SyntheticSlide {
    pub fn features_for(&self, grid: &GridSpec) -> Option<&FeatureGrid> {
        self.features
            .iter()
            .find(|f| f.grid_h() == grid.rows && f.grid_w() == grid.cols)
    }

    /// Fraction of mask cells inside the ROI.
    pub fn mask_fraction(&self) -> f64 {
        self.roi_mask.sum() / self.roi_mask.grid().cells() as f64
    }

    /// ROI coverage per cell of `grid`, in `[0, 1]`.
    pub fn roi_coverage(&self, grid: &GridSpec) -> Heatmap {
        let scale = grid.cells() as f64 / self.roi_mask.grid().cells() as f64;
        resample(&self.roi_mask, grid).scaled(scale).with_norm(Norm::Raw)
    }
}

fn ellipse_mask(grid: &GridSpec, ellipses: &[(f64, f64, f64, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; grid.cells()];
    for r in 0..grid.rows {
        let y = (r as f64 + 0.5) / grid.rows as f64;
        for c in 0..grid.cols {
            let x = (c as f64 + 0.5) / grid.cols as f64;
            let inside = ellipses.iter().any(|&(cx, cy, ax, ay)| {
                let (dx, dy) = ((x - cx) / ax, (y - cy) / ay);
                dx * dx + dy * dy <= 1.0
            });
            if inside {
                v[r * grid.cols + c] = 1.0;
            }
        }
    }
    v
}

fn standard_normal() -> Normal<f64> {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// A slide with `spec.roi_count` random axis-aligned elliptical ROIs.
/// Feature channels 0 and 1 carry the ROI coverage plus noise, channel 2
/// its complement plus noise, and the rest pure standard-normal noise.
pub fn generate_slide(wsi_id: &str, seed: u64, spec: &SlideSpec) -> Result<SyntheticSlide, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = &spec.mask_grid;
    let (lo, hi) = spec.mask_fraction;
    let mut mask = vec![0.0; grid.cells()];
    if spec.roi_count > 0 {
        // rejection keeps the ROI area inside the configured band
        for attempt in 0..1000 {
            let ellipses: Vec<(f64, f64, f64, f64)> = (0..spec.roi_count)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85),
                        rng.random_range(0.15..0.85),
                        rng.random_range(0.08..0.22),
                        rng.random_range(0.08..0.22),
                    )
                })
                .collect();
            mask = ellipse_mask(grid, &ellipses);
            let frac = mask.iter().sum::<f64>() / grid.cells() as f64;
            if (lo..=hi).contains(&frac) || attempt == 999 {
                break;
            }
        }
    }
    let roi_mask = Heatmap::new(grid.clone(), mask, Norm::Raw).expect("mask values are finite");
    let difficulty = rng.random_range(0.0..1.0);
    let domain = GradeDomain::default();
    let pick = |rng: &mut ChaCha8Rng| domain.values()[rng.random_range(0..domain.values().len())];
    let true_grade = GradePair::new(pick(&mut rng), pick(&mut rng));

    let mut slide = SyntheticSlide {
        wsi_id: wsi_id.to_string(),
        roi_mask,
        features: Vec::new(),
        true_grade,
        difficulty,
    };
    let unit = standard_normal();
    for (gi, g) in spec.feature_grids.iter().enumerate() {
        let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("features/{gi}")));
        let coverage = slide.roi_coverage(g);
        let d = spec.feature_dim;
        let mut data = Vec::with_capacity(g.cells() * d);
        for &s in coverage.values() {
            for ch in 0..d {
                let noise = unit.sample(&mut frng);
                let v = match ch {
                    0 | 1 => s + spec.noise_sd * noise,
                    2 => 1.0 - s + spec.noise_sd * noise,
                    _ => noise,
                };
                data.push(v as f32);
            }
        }
        slide
            .features
            .push(FeatureGrid::new(g.rows, g.cols, d, data).expect("finite features"));
    }
    Ok(slide)
}

fn roi_point(slide: &SyntheticSlide, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
    let g = slide.roi_mask.grid();
    let cells: Vec<usize> = slide
        .roi_mask
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect();
    if cells.is_empty() {
        return None;
    }
    let i = cells[rng.random_range(0..cells.len())];
    let (r, c) = (i / g.cols, i % g.cols);
    let x = (c as f64 + rng.random_range(0.0..1.0)) / g.cols as f64;
    let y = (r as f64 + rng.random_range(0.0..1.0)) / g.rows as f64;
    Some((x, y))
}

fn reflect(v: f64) -> f64 {
    let mut v = v.rem_euclid(2.0);
    if v > 1.0 {
        v = 2.0 - v;
    }
    v.clamp(1e-9, 1.0 - 1e-9)
}

/// Viewport of width `1/mag` centred on `(x, y)`, clipped to the slide.
fn viewport(x: f64, y: f64, mag: f64) -> BBox {
    let h = 0.5 / mag;
    BBox {
        x0: (x - h).max(0.0),
        y0: (y - h).max(0.0),
        x1: (x + h).min(1.0),
        y1: (y + h).min(1.0),
    }
}

/// One reading session. The first sample is a whole-slide overview at
/// magnification 1; every later sample picks a bin from `mag_mix` and
/// either jumps into the ROI (probability `roi_affinity · (1 − 0.6·d)`) or
/// takes a reflected Gaussian step. Grades are the slide's true grade plus
/// rounded Gaussian noise with sd `grade_noise_sd · (0.4 + 1.2·d)`.
pub fn generate_session(
    slide: &SyntheticSlide,
    profile: &ExpertiseProfile,
    expertise: Expertise,
    session_id: &str,
    pathologist_id: &str,
    seed: u64,
) -> Result<Session, SynthError> {
    profile.validate(expertise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = slide.difficulty;
    let affinity = profile.roi_affinity * (1.0 - 0.6 * d);
    let grade_sd = profile.grade_noise_sd * (0.4 + 1.2 * d);
    let levels =
        WeightedIndex::new(profile.mag_mix).map_err(|e| SynthError::InvalidProfile(expertise, e.to_string()))?;
    let step = Normal::new(0.0, profile.step_scale).expect("positive step");

    let mut samples = Vec::with_capacity(profile.n_samples);
    samples.push(ViewportSample {
        t_ms: 0,
        bbox: BBox::FULL,
        mag: 1.0,
    });
    let mut t = 0.0f64;
    let (mut x, mut y) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    for _ in 1..profile.n_samples {
        t += (profile.dwell_ms * rng.random_range(0.5..1.5)).max(1.0);
        let mag = NOMINAL_MAGS[levels.sample(&mut rng)] * rng.random_range(0.9..1.1);
        let jump = rng.random_bool(affinity);
        match (jump, roi_point(slide, &mut rng)) {
            (true, Some(p)) => (x, y) = p,
            _ => {
                x = reflect(x + step.sample(&mut rng));
                y = reflect(y + step.sample(&mut rng));
            }
        }
        let prev = samples.last().map_or(0, |s: &ViewportSample| s.t_ms);
        samples.push(ViewportSample {
            t_ms: (t.round() as u64).max(prev + 1),
            bbox: viewport(x, y, mag),
            mag,
        });
    }

    let domain = GradeDomain::default();
    let noisy = |g: u8, rng: &mut ChaCha8Rng| {
        let delta = if grade_sd > 0.0 {
            Normal::new(0.0, grade_sd).expect("sd > 0").sample(rng).round()
        } else {
            0.0
        };
        domain.clamp(g as i64 + delta as i64)
    };
    let grade = GradePair::new(
        noisy(slide.true_grade.primary, &mut rng),
        noisy(slide.true_grade.secondary, &mut rng),
    );
    let session = Session::new(
        session_id,
        pathologist_id,
        slide.wsi_id.clone(),
        expertise,
        samples,
        Some(grade),
    )
    .expect("generated samples are valid");
    Ok(session)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_slides: usize,
    pub readers_per_group: usize,
    pub profiles: Profiles,
    pub slide: SlideSpec,
    pub seed: u64,
}

impl Default for CohortConfig {
    /// 30 slides, 4 readers per expertise group.
    fn default() -> Self {
        CohortConfig {
            n_slides: 30,
            readers_per_group: 4,
            profiles: Profiles::default(),
            slide: SlideSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub config: CohortConfig,
    pub slides: Vec<SyntheticSlide>,
    /// Ordered by slide, then expertise, then reader.
    pub sessions: Vec<Session>,
}

impl SyntheticCohort {
    pub fn slide(&self, wsi_id: &str) -> Option<&SyntheticSlide> {
        self.slides.iter().find(|s| s.wsi_id == wsi_id)
    }

    /// Session count per expertise group.
    pub fn counts(&self) -> BTreeMap<Expertise, usize> {
        let mut m = BTreeMap::new();
        for s in &self.sessions {
            *m.entry(s.expertise).or_insert(0) += 1;
        }
        m
    }
}

/// Every reader of every group reads every slide. Per-item seeds are derived
/// from the cohort seed and the item id, so output does not depend on
/// scheduling.
pub fn generate_cohort(config: &CohortConfig) -> Result<SyntheticCohort, SynthError> {
    config.profiles.validate()?;
    config.slide.validate()?;
    let per_slide: Vec<(SyntheticSlide, Vec<Session>)> = (0..config.n_slides)
        .into_par_iter()
        .map(|i| {
            let wsi = format!("wsi{i:03}");
            let slide = generate_slide(&wsi, derive_seed(config.seed, &format!("slide/{wsi}")), &config.slide)?;
            let mut sessions = Vec::new();
            for e in Expertise::ALL {
                for r in 0..config.readers_per_group {
                    let sid = format!("s{i:03}-{}-{r}", e.as_str());
                    let reader = format!("{}-{r}", e.as_str());
                    let seed = derive_seed(config.seed, &format!("session/{sid}"));
                    sessions.push(generate_session(
                        &slide,
                        config.profiles.get(e),
                        e,
                        &sid,
                        &reader,
                        seed,
                    )?);
                }
            }
            Ok((slide, sessions))
        })
        .collect::<Result<_, SynthError>>()?;
    let mut slides = Vec::with_capacity(per_slide.len());
    let mut sessions = Vec::new();
    for (slide, s) in per_slide {
        slides.push(slide);
        sessions.extend(s);
    }
    Ok(SyntheticCohort {
        config: config.clone(),
        slides,
        sessions,
    })
}
