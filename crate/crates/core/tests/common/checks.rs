//! Criterion checks shared by the integration tests and the acceptance runner.
//! Each returns a one-line summary on success and the first violation otherwise.

use super::{oracles, random_heatmap, random_session, rel_close, rng, uniform};
use attnscope::analysis::{grade_concordance, pearson_with_p, student_t_two_tailed};
use attnscope::heatmap::{
    accumulate, default_mag_bins, footprint_weights, magnification_stack, resample, temporal_stack, SampleFilter,
    DEFAULT_TIME_FRACTIONS,
};
use attnscope::metrics::{cc, kld, nss, Fixations, KLD_EPS};
use attnscope::telemetry::{
    decode_atnt, encode_atnt, load_feature_tensor, parse_session_log, save_feature_tensor, write_session_log,
    AtntTensor,
};
use attnscope::training::{classification_metrics, roc_auc};
use attnscope::{FeatureGrid, GradeDomain, GradePair, GridSpec, Heatmap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};

fn agree(
    name: &str,
    i: usize,
    ours: Option<f64>,
    oracle: Option<f64>,
    tol: f64,
    worst: &mut f64,
) -> Result<(), String> {
    match (ours, oracle) {
        (Some(a), Some(b)) => {
            let e = (a - b).abs();
            *worst = worst.max(e);
            if e > tol {
                return Err(format!("{name} instance {i}: {a} vs oracle {b}"));
            }
        }
        (None, None) => {}
        _ => return Err(format!("{name} instance {i}: defined {ours:?} vs oracle {oracle:?}")),
    }
    Ok(())
}

fn maybe_constant(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Heatmap {
    if r.random_bool(0.05) {
        Heatmap::new(GridSpec::new(rows, cols), vec![2.5; rows * cols], attnscope::Norm::Raw).unwrap()
    } else {
        random_heatmap(r, rows, cols)
    }
}

/// CC, NSS, KLD, concordance, accuracy, macro-F1 and AUC against the oracles.
pub fn metric_oracles(instances: usize, seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 7];
    for i in 0..instances {
        let (rows, cols) = (r.random_range(1..=6), r.random_range(2..=6));
        let a = maybe_constant(&mut r, rows, cols);
        let b = maybe_constant(&mut r, rows, cols);
        agree(
            "cc",
            i,
            cc(&a, &b).ok(),
            oracles::cc(a.values(), b.values()),
            1e-9,
            &mut worst[0],
        )?;

        let fix: Vec<(usize, usize)> = (0..r.random_range(1..=8))
            .map(|_| (r.random_range(0..rows), r.random_range(0..cols)))
            .collect();
        agree(
            "nss",
            i,
            nss(&a, &Fixations::new(fix.clone())).ok(),
            oracles::nss(a.values(), cols, &fix),
            1e-9,
            &mut worst[1],
        )?;

        let zero = Heatmap::zeros(GridSpec::new(rows, cols));
        let q = if r.random_bool(0.03) { zero } else { b.clone() };
        agree(
            "kld",
            i,
            kld(&a, &q, KLD_EPS).ok(),
            oracles::kld(a.values(), q.values(), KLD_EPS),
            1e-9,
            &mut worst[2],
        )?;

        let domain: Vec<u8> = if r.random_bool(0.5) {
            vec![3, 4, 5]
        } else {
            let mut d: Vec<u8> = (0..r.random_range(1..=4)).map(|_| r.random_range(1..=9)).collect();
            d.sort();
            d.dedup();
            d
        };
        let gd = GradeDomain::new(domain.clone()).unwrap();
        let mut pick = || domain[r.random_range(0..domain.len())];
        let (ga, gb) = ((pick(), pick()), (pick(), pick()));
        let ours = grade_concordance(&GradePair::new(ga.0, ga.1), &GradePair::new(gb.0, gb.1), &gd).ok();
        agree(
            "concordance",
            i,
            ours,
            Some(oracles::concordance(ga, gb, &domain)),
            1e-12,
            &mut worst[3],
        )?;

        let k = r.random_range(2..=3);
        let n = r.random_range(1..=20);
        // coarse scores so argmax and rank ties actually occur
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| r.random_range(0..=10) as f64 / 10.0).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let rep = classification_metrics(&scores, &labels).map_err(|e| format!("classification instance {i}: {e}"))?;
        agree(
            "accuracy",
            i,
            Some(rep.accuracy),
            Some(oracles::accuracy(&scores, &labels)),
            1e-9,
            &mut worst[4],
        )?;
        agree(
            "macro_f1",
            i,
            Some(rep.macro_f1),
            Some(oracles::macro_f1(&scores, &labels, k)),
            1e-9,
            &mut worst[5],
        )?;
        agree(
            "auc",
            i,
            rep.auc,
            oracles::multiclass_auc(&scores, &labels, k),
            1e-12,
            &mut worst[6],
        )?;

        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64).collect();
        let pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        agree(
            "roc_auc",
            i,
            roc_auc(&s, &pos),
            oracles::auc(&s, &pos),
            1e-12,
            &mut worst[6],
        )?;
    }
    Ok(format!(
        "{instances} instances; max |err| cc {:.1e} nss {:.1e} kld {:.1e} conc {:.1e} acc {:.1e} f1 {:.1e} auc {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4], worst[5], worst[6]
    ))
}

pub fn worked_values() -> Result<String, String> {
    let d = GradeDomain::default();
    let conc = grade_concordance(&GradePair::new(3, 4), &GradePair::new(4, 4), &d).map_err(|e| e.to_string())?;
    let want = 1.0 - 1.0 / 8f64.sqrt();
    if (conc - want).abs() > 1e-12 {
        return Err(format!("concordance {conc} vs {want}"));
    }
    let m = Heatmap::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap();
    let v = nss(&m, &Fixations::new(vec![(1, 1)])).map_err(|e| e.to_string())?;
    if (v - 3.0 / 5f64.sqrt()).abs() > 1e-12 {
        return Err(format!("nss {v}"));
    }
    let p = Heatmap::from_rows(&[&[0.5, 0.5]]).unwrap();
    let q = Heatmap::from_rows(&[&[0.25, 0.75]]).unwrap();
    let k = kld(&p, &q, KLD_EPS).map_err(|e| e.to_string())?;
    if (k - 0.143841).abs() > 1e-6 {
        return Err(format!("kld {k}"));
    }
    let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
    if auc != Some(0.75) {
        return Err(format!("auc {auc:?}"));
    }
    Ok(format!(
        "concordance {conc:.12} nss {v:.12} kld {k:.6} auc {}",
        auc.unwrap()
    ))
}

/// x, y of length `n` whose sample correlation is `r` (up to rounding).
fn correlated_pair(n: usize, r: f64) -> (Vec<f64>, Vec<f64>) {
    let center = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.into_iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u = center((0..n).map(|i| i as f64).collect());
    let u: Vec<f64> = u.iter().map(|x| x / norm(&u)).collect();
    let w = center((0..n).map(|i| ((i * i) % 7) as f64).collect());
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    let v: Vec<f64> = w.iter().zip(&u).map(|(b, a)| b - dot * a).collect();
    let v: Vec<f64> = v.iter().map(|x| x / norm(&v)).collect();
    let y = u
        .iter()
        .zip(&v)
        .map(|(a, b)| r * a + (1.0 - r * r).sqrt() * b)
        .collect();
    (u, y)
}

pub fn pearson_p() -> Result<String, String> {
    let (x, y) = correlated_pair(10, 0.6319);
    let fit = pearson_with_p(&x, &y).map_err(|e| e.to_string())?;
    let t = fit.r * (8.0 / (1.0 - fit.r * fit.r)).sqrt();
    let oracle = oracles::t_two_tailed(t, 8.0, 20_000);
    if !(0.049..=0.051).contains(&fit.p) {
        return Err(format!("p = {} outside [0.049, 0.051] (r = {})", fit.p, fit.r));
    }
    if (fit.p - oracle).abs() > 1e-7 {
        return Err(format!("p = {} vs quadrature {oracle}", fit.p));
    }
    let mut worst = 0.0f64;
    for df in [1.0, 2.0, 3.0, 5.0, 8.0, 13.0, 30.0] {
        for t in [0.0, 0.3, 1.0, 2.306, 4.0, 9.0] {
            let e = (student_t_two_tailed(t, df) - oracles::t_two_tailed(t, df, 20_000)).abs();
            worst = worst.max(e);
            if e > 1e-7 {
                return Err(format!("t-tail at t={t}, df={df}: error {e:e}"));
            }
        }
    }
    Ok(format!(
        "r {:.4} p {:.6} quadrature {oracle:.6}; tail grid max err {worst:.1e}",
        fit.r, fit.p
    ))
}

/// Mass conservation, temporal monotonicity, magnification partition and
/// resampling mass for `n` random sessions, all at 1e-9 relative.
pub fn conservation(n: usize, seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let bins = default_mag_bins();
    for i in 0..n {
        let s = random_session(&mut r, i);
        let grid = GridSpec::new(r.random_range(1..=12), r.random_range(1..=12));
        let dwell_total: f64 = oracles::dwells(&s).iter().sum();

        let full = accumulate(&s, &grid, &SampleFilter::default()).map_err(|e| e.to_string())?;
        if !rel_close(full.sum(), dwell_total, 1e-9) {
            return Err(format!("session {i}: mass {} vs dwell {dwell_total}", full.sum()));
        }
        let brute = oracles::accumulate(&s, &grid, |_| true);
        for (a, b) in full.values().iter().zip(&brute) {
            if !rel_close(*a, *b, 1e-9) {
                return Err(format!("session {i}: cell {a} vs brute force {b}"));
            }
        }
        for smp in s.samples() {
            let w: f64 = footprint_weights(smp, &grid).iter().map(|(_, w)| w).sum();
            if (w - 1.0).abs() > 1e-12 {
                return Err(format!("session {i}: footprint weights sum to {w}"));
            }
        }

        let stack = temporal_stack(&s, &grid, &DEFAULT_TIME_FRACTIONS).map_err(|e| e.to_string())?;
        for pair in stack.windows(2) {
            for (a, b) in pair[0].values().iter().zip(pair[1].values()) {
                if *a > *b * (1.0 + 1e-9) + 1e-12 {
                    return Err(format!("session {i}: temporal map decreased {a} -> {b}"));
                }
            }
        }

        let mags = magnification_stack(&s, &bins).map_err(|e| e.to_string())?;
        let binned: f64 = mags.maps.iter().map(|m| m.heatmap.sum()).sum();
        if !rel_close(binned + mags.dropped_mass, dwell_total, 1e-9) {
            return Err(format!(
                "session {i}: partition {binned} + {} vs {dwell_total}",
                mags.dropped_mass
            ));
        }

        let target = GridSpec::new(r.random_range(1..=60), r.random_range(1..=60));
        for m in mags.maps.iter().map(|m| &m.heatmap).chain([&full]) {
            let out = resample(m, &target);
            if !rel_close(out.sum(), m.sum(), 1e-9) {
                return Err(format!("session {i}: resample {} vs {}", out.sum(), m.sum()));
            }
        }
    }
    Ok(format!(
        "{n} sessions; mass, brute-force cells, footprints, monotonicity, partition and resampling hold"
    ))
}

fn random_atnt(r: &mut ChaCha8Rng) -> AtntTensor {
    let dims: Vec<u32> = (0..r.random_range(1..=4)).map(|_| r.random_range(1..=5)).collect();
    let n = dims.iter().product::<u32>() as usize;
    let data = uniform(r, n, -1e6, 1e6).into_iter().map(|v| v as f32).collect();
    AtntTensor::new(dims, data)
}

fn mutate(r: &mut ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
    let mut b = bytes.to_vec();
    match r.random_range(0..5) {
        0 if !b.is_empty() => {
            let i = r.random_range(0..b.len());
            b[i] ^= 1 << r.random_range(0..8);
        }
        1 => b.truncate(r.random_range(0..=b.len())),
        2 => {
            let i = r.random_range(0..=b.len());
            b.insert(i, r.random());
        }
        3 if !b.is_empty() => {
            let i = r.random_range(0..b.len());
            b[i] = r.random();
        }
        _ => b = (0..r.random_range(0..64)).map(|_| r.random()).collect(),
    }
    b
}

/// ATNT and session JSONL round trips, then mutation fuzzing of both
/// decoders. A mutated input may still be valid; it must never panic.
pub fn round_trips(n: usize, seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let mut rejected = 0usize;
    let mut fuzzed = 0usize;
    for i in 0..n {
        let t = random_atnt(&mut r);
        let bytes = encode_atnt(&t);
        let back = decode_atnt(&bytes).map_err(|e| format!("atnt {i}: {e}"))?;
        if back != t || encode_atnt(&back) != bytes {
            return Err(format!("atnt {i}: round trip changed the tensor"));
        }
        if t.dims.len() == 3 {
            let d: Vec<usize> = t.dims_usize();
            let fg = FeatureGrid::new(d[0], d[1], d[2], t.data.clone()).unwrap();
            if load_feature_tensor(&save_feature_tensor(&fg)).ok() != Some(fg) {
                return Err(format!("feature tensor {i}: round trip changed the grid"));
            }
        }

        let s = random_session(&mut r, i);
        let text = write_session_log(&s);
        let parsed = parse_session_log(text.as_bytes()).map_err(|e| format!("session {i}: {e}"))?;
        if parsed != s || write_session_log(&parsed) != text {
            return Err(format!("session {i}: round trip changed the session"));
        }

        for _ in 0..4 {
            let bad = mutate(&mut r, &bytes);
            match catch_unwind(AssertUnwindSafe(|| decode_atnt(&bad))) {
                Err(_) => return Err(format!("atnt decoder panicked on fuzz case {i}")),
                Ok(res) => rejected += res.is_err() as usize,
            }
            let bad = mutate(&mut r, text.as_bytes());
            match catch_unwind(AssertUnwindSafe(|| parse_session_log(&bad))) {
                Err(_) => return Err(format!("session parser panicked on fuzz case {i}")),
                Ok(res) => rejected += res.is_err() as usize,
            }
            fuzzed += 2;
        }
    }
    Ok(format!(
        "{n} ATNT + {n} JSONL round trips; {fuzzed} fuzz cases, {rejected} typed errors, no panics"
    ))
}
