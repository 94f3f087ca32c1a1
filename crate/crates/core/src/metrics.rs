//! Classification metrics over an evaluated split.

use serde::Serialize;

use crate::error::{HmtError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[label][prediction]`
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Confusion matrix with one-vs-rest rates. `0/0` counts as 0.
pub fn metrics_from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(HmtError::EmptySplit);
    }
    if predictions.len() != labels.len() {
        return Err(HmtError::dim("metrics", &[predictions.len()], &[labels.len()]));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        for c in [p, y] {
            if c >= classes {
                return Err(HmtError::LabelOutOfRange { label: c, classes });
            }
        }
        confusion[y][p] += 1;
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let mut precision = Vec::with_capacity(classes);
    let mut recall = Vec::with_capacity(classes);
    let mut f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let predicted: u64 = (0..classes).map(|y| confusion[y][c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / classes as f64;
    Ok(MetricsReport {
        samples: predictions.len(),
        accuracy: ratio(correct, predictions.len() as u64),
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        confusion,
    })
}
