//! Deliberately naive reference implementations.

use attnscope::{GridSpec, Session};

/// Pearson r from sample (n − 1) moments; `None` when either side is constant.
pub fn cc(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0);
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0);
    if va == 0.0 || vb == 0.0 || n < 2.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

pub fn nss(map: &[f64], cols: usize, fixations: &[(usize, usize)]) -> Option<f64> {
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    let sd = (map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 || fixations.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &(r, c) in fixations {
        total += (map[r * cols + c] - mean) / sd;
    }
    Some(total / fixations.len() as f64)
}

/// KL(P‖Q) after unit-sum normalization, an `eps` floor and renormalization.
pub fn kld(p: &[f64], q: &[f64], eps: f64) -> Option<f64> {
    let prep = |v: &[f64]| -> Option<Vec<f64>> {
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            return None;
        }
        let mut f: Vec<f64> = v.iter().map(|x| if x / s < eps { eps } else { x / s }).collect();
        let t: f64 = f.iter().sum();
        for x in &mut f {
            *x /= t;
        }
        Some(f)
    };
    let (p, q) = (prep(p)?, prep(q)?);
    let mut d = 0.0;
    for i in 0..p.len() {
        d += p[i] * (p[i].ln() - q[i].ln());
    }
    Some(d.max(0.0))
}

/// `1 − dist / max_dist`, with the maximum found by enumerating the domain.
pub fn concordance(a: (u8, u8), b: (u8, u8), domain: &[u8]) -> f64 {
    let dist = |x: (u8, u8), y: (u8, u8)| {
        let dp = x.0 as f64 - y.0 as f64;
        let ds = x.1 as f64 - y.1 as f64;
        (dp * dp + ds * ds).sqrt()
    };
    let mut max = 0.0f64;
    for &p1 in domain {
        for &s1 in domain {
            for &p2 in domain {
                for &s2 in domain {
                    max = max.max(dist((p1, s1), (p2, s2)));
                }
            }
        }
    }
    if max == 0.0 {
        return 1.0;
    }
    1.0 - dist(a, b) / max
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(s, &l)| argmax(s) == l).count();
    hits as f64 / labels.len() as f64
}

pub fn macro_f1(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let mut total = 0.0;
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (p, l) in pred.iter().zip(labels) {
            match (*p == c, *l == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        if tp + fp + fneg > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fneg);
        }
    }
    total / k as f64
}

/// Pair counting: each (positive, negative) pair scores 1 if ordered, ½ if tied.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut good = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| good / pairs as f64)
}

pub fn multiclass_auc(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Option<f64> {
    if k == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&s, &pos);
    }
    let per: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc(&s, &pos)
        })
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

pub fn dwells(session: &Session) -> Vec<f64> {
    let s = session.samples();
    let mut gaps: Vec<f64> = Vec::new();
    for i in 1..s.len() {
        gaps.push((s[i].t_ms - s[i - 1].t_ms) as f64);
    }
    let mut sorted = gaps.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    };
    gaps.push(median);
    gaps
}

/// Per-cell dwell × overlap area / viewport area, summed over kept samples.
pub fn accumulate(session: &Session, grid: &GridSpec, keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let dw = dwells(session);
    let mut out = vec![0.0; grid.cells()];
    for (i, s) in session.samples().iter().enumerate() {
        if !keep(i) {
            continue;
        }
        let b = &s.bbox;
        let area = (b.x1 - b.x0) * (b.y1 - b.y0);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let (cx0, cx1) = (c as f64 / grid.cols as f64, (c + 1) as f64 / grid.cols as f64);
                let (cy0, cy1) = (r as f64 / grid.rows as f64, (r + 1) as f64 / grid.rows as f64);
                let ox = (b.x1.min(cx1) - b.x0.max(cx0)).max(0.0);
                let oy = (b.y1.min(cy1) - b.y0.max(cy0)).max(0.0);
                out[r * grid.cols + c] += dw[i] * ox * oy / area;
            }
        }
    }
    out
}

/// Two-tailed Student-t tail probability by direct quadrature of the
/// unnormalized density. With x = tan θ both integrals live on finite
/// intervals; composite Simpson with `n` panels.
pub fn t_two_tailed(t: f64, df: f64, n: usize) -> f64 {
    let f = |theta: f64| {
        let x = theta.tan();
        let c = theta.cos();
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) / (c * c)
    };
    let simpson = |a: f64, b: f64| {
        let h = (b - a) / n as f64;
        // the integrand's limit at π/2 is 0 for df > 1 and df at df = 1
        let end = if b >= std::f64::consts::FRAC_PI_2 {
            if df > 1.0 {
                0.0
            } else {
                df
            }
        } else {
            f(b)
        };
        let mut s = f(a) + end;
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let tail = simpson(t.abs().atan(), half_pi);
    let whole = simpson(0.0, half_pi);
    tail / whole
}
