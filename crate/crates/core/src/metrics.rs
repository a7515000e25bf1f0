//! AUC, F1 and accuracy for bag classification. Binary AUC is the
//! Mann–Whitney rank statistic; multi-class scores are macro one-vs-rest
//! averages over the classes present in the labels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("got {preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("evaluate needs at least one sample")]
    Empty,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

/// Per-class one-vs-rest breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the split contains only one side of the class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Absent (null in JSON) when undefined, e.g. a single-class split.
    pub auc: Option<f64>,
    pub f1: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub per_class: Vec<ClassStats>,
}

/// Mann–Whitney AUC: (#concordant positive/negative pairs + 0.5·ties) / (P·N),
/// computed from mean ranks. Returns `None` when only one class is present.
pub fn binary_auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return None;
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Mean ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    Some(u / (p as f64 * n as f64))
}

/// Binary (c = 2): class 1 iff p₁ ≥ threshold. Otherwise argmax with
/// lowest-index tie-break.
pub fn classify(probs: &Matrix, threshold: f64) -> usize {
    if probs.cols() == 2 {
        return usize::from(probs.get(0, 1) >= threshold);
    }
    let mut best = 0;
    for c in 1..probs.cols() {
        if probs.get(0, c) > probs.get(0, best) {
            best = c;
        }
    }
    best
}

pub const CLASSIFY_THRESHOLD: f64 = 0.5;

/// Accuracy, F1 and AUC over aligned prediction/label lists. The number of
/// classes is taken from the prediction width; binary scores come from class
/// 1, multi-class scores are macro means over classes present in the labels.
pub fn evaluate(preds: &[Matrix], labels: &[usize]) -> Result<EvalResult, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n_classes = preds[0].cols();
    for &l in labels {
        if l >= n_classes {
            return Err(MetricsError::LabelOutOfRange { label: l, n_classes });
        }
    }

    let predicted: Vec<usize> = preds.iter().map(|p| classify(p, CLASSIFY_THRESHOLD)).collect();
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / labels.len() as f64;

    let mut per_class = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let tp = predicted
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == class && l == class)
            .count();
        let fp = predicted
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == class && l != class)
            .count();
        let fne = predicted
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != class && l == class)
            .count();
        let support = labels.iter().filter(|&&l| l == class).count();
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fne > 0 { tp as f64 / (tp + fne) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let ovr_scores: Vec<f64> = preds.iter().map(|p| p.get(0, class)).collect();
        let ovr_labels: Vec<usize> = labels.iter().map(|&l| usize::from(l == class)).collect();
        let auc = binary_auc(&ovr_scores, &ovr_labels);
        per_class.push(ClassStats { class, support, precision, recall, f1, auc });
    }

    let (f1, auc) = if n_classes == 2 {
        (per_class[1].f1, per_class[1].auc)
    } else {
        // Macro means over classes present in the labels.
        let present: Vec<&ClassStats> = per_class.iter().filter(|c| c.support > 0).collect();
        let f1 = present.iter().map(|c| c.f1).sum::<f64>() / present.len() as f64;
        let aucs: Vec<f64> = present.iter().filter_map(|c| c.auc).collect();
        let auc = if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        };
        (f1, auc)
    };

    Ok(EvalResult { auc, f1, accuracy, n_samples: labels.len(), per_class })
}
