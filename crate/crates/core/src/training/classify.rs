use super::TrainError;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` when no class has both positive and negative examples.
    pub auc: Option<f64>,
    /// Classes with no true examples; each contributes F1 = 0.
    pub absent_classes: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(row: &[f64]) -> usize {
    // strict > keeps the lowest index on ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rank-based ROC-AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. `None` if either class is empty.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie blocks, 1-based
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Accuracy, macro F1 and ROC-AUC from per-class scores (`scores[i]` has
/// one entry per class, e.g. softmax probabilities). For two classes AUC
/// ranks by the class-1 score; for more it is the macro one-vs-rest mean
/// over classes that have both positives and negatives.
pub fn classification_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationReport, TrainError> {
    let n = scores.len();
    if n == 0 || labels.len() != n {
        return Err(TrainError::ShapeMismatch(format!(
            "{n} score rows vs {} labels",
            labels.len()
        )));
    }
    let k = scores[0].len();
    if k < 2 || scores.iter().any(|r| r.len() != k) {
        return Err(TrainError::ShapeMismatch(
            "score rows must share a width of at least 2".into(),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(TrainError::ShapeMismatch(format!("label {l} outside {k} classes")));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::ShapeMismatch("scores must be finite".into()));
    }

    let mut confusion = vec![vec![0usize; k]; k];
    for (row, &y) in scores.iter().zip(labels) {
        confusion[y][argmax(row)] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let mut absent_classes = Vec::new();
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        if actual == 0 {
            absent_classes.push(c);
        }
        let denom = (actual + predicted) as f64;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }

    let auc = if k == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        roc_auc(&s, &pos)
    } else {
        let per_class: Vec<f64> = (0..k)
            .filter_map(|c| {
                let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                roc_auc(&s, &pos)
            })
            .collect();
        (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
    };

    Ok(ClassificationReport {
        accuracy: correct as f64 / n as f64,
        macro_f1: f1_sum / k as f64,
        auc,
        absent_classes,
        confusion,
    })
}
