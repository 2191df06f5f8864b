//! Weighted RMSE, average precision and one-vs-rest macro average precision.

use log::warn;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric inputs have different lengths ({0} vs {1})")]
    Length(usize, usize),
    #[error("total weight is zero; the metric is undefined")]
    ZeroWeight,
    #[error("no weighted positive labels; average precision is undefined")]
    NoPositives,
    #[error("binary labels must be 0 or 1, found {0}")]
    NotBinary(f64),
    #[error("no class has a weighted positive label")]
    NoClasses,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::Length(a, b))
    }
}

/// `sqrt(sum w (p - y)^2 / sum w)`.
pub fn rmse(pred: &[f64], label: &[f64], weight: &[f64]) -> Result<f64> {
    same_len(pred.len(), label.len())?;
    same_len(pred.len(), weight.len())?;
    let total: f64 = weight.iter().sum();
    if total == 0.0 {
        return Err(MetricError::ZeroWeight);
    }
    let sse: f64 = pred
        .iter()
        .zip(label)
        .zip(weight)
        .map(|((p, y), w)| w * (p - y) * (p - y))
        .sum();
    Ok((sse / total).sqrt())
}

/// Weighted average precision: over descending distinct score thresholds,
/// the sum of recall increments times precision. Tied scores form one
/// threshold.
pub fn auprc(scores: &[f64], labels: &[f64], weights: &[f64]) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    same_len(scores.len(), weights.len())?;
    if let Some(&y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(MetricError::NotBinary(y));
    }
    let positives: f64 = labels.iter().zip(weights).map(|(y, w)| y * w).sum();
    if positives <= 0.0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            let k = order[i];
            tp += weights[k] * labels[k];
            fp += weights[k] * (1.0 - labels[k]);
            i += 1;
        }
        let recall = tp / positives;
        if recall > prev_recall {
            ap += (recall - prev_recall) * tp / (tp + fp);
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Mean over classes of one-vs-rest average precision. `scores[i]` holds the
/// per-class scores of sample `i`; classes with no weighted sample are
/// skipped with a warning.
pub fn auprc_macro(scores: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    same_len(scores.len(), weights.len())?;
    let k = scores.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(MetricError::TooFewClasses(k));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for class in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[class]).collect();
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == class))).collect();
        match auprc(&col, &y, weights) {
            Ok(ap) => {
                sum += ap;
                used += 1;
            }
            Err(MetricError::NoPositives) => warn!("class {class} has no weighted samples; skipped"),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(MetricError::NoClasses);
    }
    Ok(sum / used as f64)
}

/// Sample mean and standard deviation (denominator `n - 1`; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
