use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Exact fraction of matching class indices.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::BatchMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

fn check_auc(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::BatchMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: `(2 * #(pos > neg) + #(pos == neg)) / (2 * P * N)`,
/// counted exactly in integers after one sort.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_auc(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut greater, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        greater += p * neg_below;
        ties += p * n;
        neg_below += n;
        i = j;
    }
    Ok((2 * greater + ties) as f64 / (2 * pos * neg) as f64)
}

/// Quadratic pair enumeration with the same tie convention as [`auc`].
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_auc(scores, labels)?;
    let (mut greater, mut ties) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            if si > sj {
                greater += 1;
            } else if si == sj {
                ties += 1;
            }
        }
    }
    Ok((2 * greater + ties) as f64 / (2 * pos * neg) as f64)
}

/// One-vs-rest AUC per class (`None` when a class has no positives or no
/// negatives) and their mean over the defined classes.
pub fn macro_auc(probabilities: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(f64, Vec<Option<f64>>)> {
    if probabilities.len() != labels.len() {
        return Err(Error::BatchMismatch(probabilities.len(), labels.len()));
    }
    let k = probabilities.first().map_or(0, Vec::len);
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let s: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
        let l: Vec<u8> = labels.iter().map(|l| l[c]).collect();
        per_class.push(match auc(&s, &l) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per_class))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_predictions(split: &str, probabilities: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<Self> {
        let k = probabilities.first().map_or(0, Vec::len);
        let pred: Vec<usize> = probabilities.iter().map(|p| super::argmax(p)).collect();
        let truth: Vec<usize> = labels.iter().map(|l| super::argmax(l)).collect();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            confusion[t][p] += 1;
        }
        let (macro_auc, per_class_auc) = macro_auc(probabilities, labels)?;
        Ok(Self {
            split: split.to_string(),
            n: pred.len(),
            accuracy: accuracy(&pred, &truth)?,
            macro_auc,
            per_class_auc,
            confusion,
        })
    }
}
