//! Cohort statistics relating grading concordance to attention agreement.

use crate::heatmap::{accumulate, GridSpec, Heatmap, SampleFilter};
use crate::metrics::{cc, MetricError};
use crate::telemetry::{Expertise, GradeDomain, GradePair, Session};
use serde::Serialize;
use statrs::function::beta::beta_reg;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("grade {0} outside domain")]
    GradeOutOfDomain(u8),
    #[error("at least two maps are required")]
    TooFewMaps,
    #[error("at least two grade pairs are required")]
    TooFewGrades,
    #[error("at least three points are required, got {0}")]
    TooFewPoints(usize),
    #[error("input is constant")]
    ConstantInput,
    #[error("x and y lengths differ")]
    LengthMismatch,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Normalized Euclidean agreement between two (primary, secondary) grades.
///
/// The normalizer uses the largest squared difference the domain allows for
/// each component, so the score lies in `[0, 1]` for every pair.
pub fn grade_concordance(a: &GradePair, b: &GradePair, domain: &GradeDomain) -> Result<f64, AnalysisError> {
    for g in [a.primary, a.secondary, b.primary, b.secondary] {
        if !domain.contains(g) {
            return Err(AnalysisError::GradeOutOfDomain(g));
        }
    }
    let span = (domain.max() - domain.min()) as f64;
    if span == 0.0 {
        return Ok(1.0);
    }
    let dp = a.primary as f64 - b.primary as f64;
    let ds = a.secondary as f64 - b.secondary as f64;
    let dist = (dp * dp + ds * ds).sqrt();
    let max_dist = (2.0 * span * span).sqrt();
    Ok(1.0 - dist / max_dist)
}

fn unordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Mean CC over all unordered pairs of maps.
pub fn pairwise_attention_agreement(maps: &[Heatmap]) -> Result<f64, AnalysisError> {
    if maps.len() < 2 {
        return Err(AnalysisError::TooFewMaps);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, j) in unordered_pairs(maps.len()) {
        total += cc(&maps[i], &maps[j])?;
        n += 1;
    }
    Ok(total / n as f64)
}

pub fn mean_pairwise_concordance(grades: &[GradePair], domain: &GradeDomain) -> Result<f64, AnalysisError> {
    if grades.len() < 2 {
        return Err(AnalysisError::TooFewGrades);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, j) in unordered_pairs(grades.len()) {
        total += grade_concordance(&grades[i], &grades[j], domain)?;
        n += 1;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PearsonFit {
    pub r: f64,
    /// Two-tailed p-value from Student's t with `n − 2` degrees of freedom.
    pub p: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Two-tailed tail probability `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(0.5 * df, 0.5, x)
}

/// Pearson correlation with significance and the least-squares line `y = slope·x + intercept`.
pub fn pearson_with_p(xs: &[f64], ys: &[f64]) -> Result<PearsonFit, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch);
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(AnalysisError::ConstantInput);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        student_t_two_tailed(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    let slope = sxy / sxx;
    Ok(PearsonFit {
        r,
        p,
        slope,
        intercept: my - slope * mx,
        n,
    })
}

/// One slide as seen by one expertise group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WsiAgreementPoint {
    pub wsi_id: String,
    pub expertise: Expertise,
    pub n_readers: usize,
    pub attn_agreement: f64,
    pub grade_concordance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub expertise: Expertise,
    pub n_points: usize,
    pub mean_agreement: Option<f64>,
    pub mean_concordance: Option<f64>,
    /// Absent when fewer than three points or either axis is constant.
    pub fit: Option<PearsonFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub points: Vec<WsiAgreementPoint>,
    pub groups: Vec<GroupStats>,
    /// (wsi, expertise) pairs skipped because a reader's map was constant.
    pub skipped: Vec<(String, Expertise)>,
}

/// Per-slide, per-group attention agreement versus grade concordance.
///
/// A point needs at least two readers of the same expertise that both
/// entered grades. Output order is by `(wsi_id, expertise)` and does not
/// depend on the order of `sessions`.
pub fn expertise_agreement_report(sessions: &[Session], grid: &GridSpec, domain: &GradeDomain) -> AgreementReport {
    let mut groups: BTreeMap<(&str, Expertise), Vec<&Session>> = BTreeMap::new();
    for s in sessions.iter().filter(|s| s.grade.is_some()) {
        groups.entry((s.wsi_id.as_str(), s.expertise)).or_default().push(s);
    }

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for ((wsi, expertise), mut readers) in groups {
        if readers.len() < 2 {
            continue;
        }
        readers.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let maps: Result<Vec<Heatmap>, _> = readers
            .iter()
            .map(|s| accumulate(s, grid, &SampleFilter::default()))
            .collect();
        let grades: Vec<GradePair> = readers.iter().filter_map(|s| s.grade).collect();
        let attn = maps.ok().and_then(|m| pairwise_attention_agreement(&m).ok());
        let conc = mean_pairwise_concordance(&grades, domain).ok();
        match (attn, conc) {
            (Some(attn_agreement), Some(grade_concordance)) => points.push(WsiAgreementPoint {
                wsi_id: wsi.to_string(),
                expertise,
                n_readers: readers.len(),
                attn_agreement,
                grade_concordance,
            }),
            _ => skipped.push((wsi.to_string(), expertise)),
        }
    }

    let groups = Expertise::ALL
        .iter()
        .map(|&e| {
            let xs: Vec<f64> = points
                .iter()
                .filter(|p| p.expertise == e)
                .map(|p| p.attn_agreement)
                .collect();
            let ys: Vec<f64> = points
                .iter()
                .filter(|p| p.expertise == e)
                .map(|p| p.grade_concordance)
                .collect();
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            GroupStats {
                expertise: e,
                n_points: xs.len(),
                mean_agreement: mean(&xs),
                mean_concordance: mean(&ys),
                fit: pearson_with_p(&xs, &ys).ok(),
            }
        })
        .collect();

    AgreementReport {
        points,
        groups,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(p: u8, s: u8) -> GradePair {
        GradePair::new(p, s)
    }

    #[test]
    fn concordance_examples() {
        let d = GradeDomain::default();
        assert_eq!(grade_concordance(&g(3, 4), &g(3, 4), &d).unwrap(), 1.0);
        assert!(grade_concordance(&g(3, 3), &g(5, 5), &d).unwrap().abs() < 1e-15);
        let v = grade_concordance(&g(3, 4), &g(4, 4), &d).unwrap();
        assert!((v - (1.0 - 1.0 / 8f64.sqrt())).abs() < 1e-12);
        assert_eq!(
            grade_concordance(&g(2, 4), &g(4, 4), &d),
            Err(AnalysisError::GradeOutOfDomain(2))
        );
    }

    #[test]
    fn mean_concordance_examples() {
        let d = GradeDomain::default();
        assert_eq!(
            mean_pairwise_concordance(&[g(4, 4), g(4, 4), g(4, 4)], &d).unwrap(),
            1.0
        );
        assert!(mean_pairwise_concordance(&[g(3, 3), g(5, 5)], &d).unwrap().abs() < 1e-15);
        let v = mean_pairwise_concordance(&[g(3, 3), g(3, 3), g(5, 5)], &d).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            mean_pairwise_concordance(&[g(3, 3)], &d),
            Err(AnalysisError::TooFewGrades)
        );
    }

    #[test]
    fn attention_agreement_examples() {
        let a = Heatmap::from_rows(&[&[1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(pairwise_attention_agreement(&[a.clone(), a.clone()]).unwrap(), 1.0);
        assert_eq!(
            pairwise_attention_agreement(std::slice::from_ref(&a)),
            Err(AnalysisError::TooFewMaps)
        );
        // b is a copy of a; c is uncorrelated with both by construction
        let a = Heatmap::from_rows(&[&[1.0, -1.0, 1.0, -1.0].map(|v: f64| v + 1.0)]).unwrap();
        let c = Heatmap::from_rows(&[&[1.0, 1.0, -1.0, -1.0].map(|v: f64| v + 1.0)]).unwrap();
        let v = pairwise_attention_agreement(&[a.clone(), a, c]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_collinear_and_reversed() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 4.0, 6.0, 8.0, 10.0];
        let fit = pearson_with_p(&xs, &ys).unwrap();
        assert!((fit.r - 1.0).abs() < 1e-12);
        assert!(fit.p < 1e-12);
        assert!((fit.slope - 2.0).abs() < 1e-12 && fit.intercept.abs() < 1e-12);

        let ys = [1.0, 3.0, 2.0, 5.0, 4.0];
        let fwd = pearson_with_p(&xs, &ys).unwrap();
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        let back = pearson_with_p(&rev, &ys).unwrap();
        assert!((fwd.r + back.r).abs() < 1e-15);
        assert!((fwd.p - back.p).abs() < 1e-15);
    }

    #[test]
    fn pearson_errors() {
        assert_eq!(
            pearson_with_p(&[1.0, 2.0], &[1.0, 2.0]),
            Err(AnalysisError::TooFewPoints(2))
        );
        assert_eq!(
            pearson_with_p(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(AnalysisError::ConstantInput)
        );
    }
}
