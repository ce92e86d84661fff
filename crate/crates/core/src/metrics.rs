//! Confusion matrix and the per-class / macro classification metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(true_labels: &[usize], pred_labels: &[usize], k: usize) -> Result<Self> {
        if true_labels.len() != pred_labels.len() {
            return Err(Error::size(format!(
                "{} true labels but {} predictions",
                true_labels.len(),
                pred_labels.len()
            )));
        }
        let mut counts = vec![vec![0u64; k]; k];
        for (&t, &p) in true_labels.iter().zip(pred_labels) {
            if t >= k || p >= k {
                return Err(Error::Label(format!(
                    "label pair ({t}, {p}) outside [0, {k})"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|row| row.len() != k) {
            return Err(Error::size("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub top1_error: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

/// `num / den`, with 0/0 defined as 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("cannot compute metrics of an empty confusion matrix".into()));
    }
    let k = cm.num_classes();
    let c = cm.counts();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|i| {
            let tp = c[i][i] as f64;
            let predicted: u64 = (0..k).map(|t| c[t][i]).sum();
            let actual: u64 = c[i].iter().sum();
            let fp = predicted as f64 - tp;
            let fn_ = actual as f64 - tp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassMetrics {
                class: i,
                precision,
                recall,
                // from counts, so every metric is one rounded quotient and
                // iou <= min(precision, recall) <= f1 survives rounding
                f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
                iou: ratio(tp, tp + fp + fn_),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let accuracy = cm.trace() as f64 / total as f64;
    Ok(MetricsReport {
        accuracy,
        top1_error: 1.0 - accuracy,
        macro_avg: MacroMetrics {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
            iou: mean(|m| m.iou),
        },
        per_class,
        confusion: c.to_vec(),
    })
}
