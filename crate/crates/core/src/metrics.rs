//! Support-weighted average precision and F1 for the four-class problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tissue::{TissueClass, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: TissueClass,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the class has no positives in the evaluated set.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted_ap: f64,
    pub weighted_f1: f64,
    pub n: usize,
    pub per_class: Vec<ClassMetrics>,
    /// Classes with zero support; their terms are skipped.
    pub absent_classes: Vec<TissueClass>,
}

/// One-vs-rest average precision with step-wise summation over distinct
/// score thresholds (tied scores form one step). `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Some(ap)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `scores[i]` holds per-class scores (e.g. softmax probabilities) for sample `i`.
pub fn evaluate_scores(scores: &[[f64; NUM_CLASSES]], labels: &[TissueClass]) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction scores".into()));
    }
    let n = labels.len();
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut absent = Vec::new();
    let (mut w_ap, mut w_f1) = (0.0, 0.0);
    for class in TissueClass::ALL {
        let c = class.index();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let support = positive.iter().filter(|&&p| p).count();
        let tp = (0..n).filter(|&i| positive[i] && preds[i] == c).count();
        let predicted = preds.iter().filter(|&&p| p == c).count();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let ap = average_precision(&col, &positive);
        let w = support as f64 / n as f64;
        match ap {
            Some(ap) => w_ap += w * ap,
            None => absent.push(class),
        }
        w_f1 += w * f1;
        per_class.push(ClassMetrics {
            class,
            support,
            precision,
            recall,
            f1,
            ap,
        });
    }
    Ok(MetricsReport {
        weighted_ap: w_ap,
        weighted_f1: w_f1,
        n,
        per_class,
        absent_classes: absent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    /// `0.94±0.05`.
    pub fn display(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}
