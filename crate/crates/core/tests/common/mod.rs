//! Shared generators, brute-force oracles and criterion checks for the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod oracles;

use attnscope::telemetry::BBox;
use attnscope::{Expertise, GradePair, Heatmap, Session, ViewportSample};
use attnscope::{GridSpec, Norm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Non-negative map; roughly a fifth of the cells are exactly zero.
pub fn random_heatmap(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Heatmap {
    let values = (0..rows * cols)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0..10.0)
            }
        })
        .collect();
    Heatmap::new(GridSpec::new(rows, cols), values, Norm::Raw).unwrap()
}

const MAGS: [f64; 13] = [0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 7.0, 10.0, 12.0, 15.0, 20.0, 30.0, 40.0];

pub fn random_bbox(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.01..=1.0);
    let h = rng.random_range(0.01..=1.0);
    let x0 = rng.random_range(0.0..=1.0 - w);
    let y0 = rng.random_range(0.0..=1.0 - h);
    BBox {
        x0,
        y0,
        x1: (x0 + w).min(1.0),
        y1: (y0 + h).min(1.0),
    }
}

/// A valid session with 2..=40 samples, irregular gaps, magnifications both
/// inside and outside the default bins, and an optional grade.
pub fn random_session(rng: &mut ChaCha8Rng, id: usize) -> Session {
    let n = rng.random_range(2..=40);
    let mut t = rng.random_range(0..1000u64);
    let samples = (0..n)
        .map(|_| {
            let s = ViewportSample {
                t_ms: t,
                bbox: random_bbox(rng),
                mag: MAGS[rng.random_range(0..MAGS.len())],
            };
            t += rng.random_range(1..500);
            s
        })
        .collect();
    let expertise = Expertise::ALL[rng.random_range(0..3)];
    let grade = rng.random_bool(0.7).then(|| GradePair {
        primary: rng.random_range(3..=5),
        secondary: rng.random_range(3..=5),
        confidence: rng.random_bool(0.5).then(|| rng.random_range(0.0..=1.0)),
    });
    Session::new(
        format!("s{id}"),
        format!("p{}", id % 7),
        format!("wsi{}", id % 5),
        expertise,
        samples,
        grade,
    )
    .unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
