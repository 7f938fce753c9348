//! Accuracy, micro-averaged and macro-averaged average precision.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UsatError};

/// Scores and binary labels, `[n_samples, n_classes]`.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    pub scores: Array2<f64>,
    pub labels: Array2<f64>,
}

impl EvalBatch {
    pub fn new(scores: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        if scores.dim() != labels.dim() {
            return Err(UsatError::Shape(format!(
                "scores {:?} vs labels {:?}",
                scores.dim(),
                labels.dim()
            )));
        }
        if !scores.iter().all(|v| v.is_finite()) {
            return Err(UsatError::NonFinite("scores".into()));
        }
        if !labels.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(UsatError::Range("labels must be 0 or 1".into()));
        }
        Ok(Self { scores, labels })
    }
}

/// Step-interpolated AP: sum over positive hits of `precision@rank / #positives`,
/// ranking by descending score with ties kept in index order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(UsatError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l > 0.5).count();
    if positives == 0 {
        return Err(UsatError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// AP over all flattened (sample, class) pairs.
pub fn micro_ap(batch: &EvalBatch) -> Result<f64> {
    let scores: Vec<f64> = batch.scores.iter().copied().collect();
    let labels: Vec<f64> = batch.labels.iter().copied().collect();
    average_precision(&scores, &labels)
}

/// Per-class AP for classes with at least one positive, `None` otherwise.
pub fn per_class_ap(batch: &EvalBatch) -> Vec<Option<f64>> {
    batch
        .scores
        .axis_iter(Axis(1))
        .zip(batch.labels.axis_iter(Axis(1)))
        .map(|(s, l)| average_precision(&s.to_vec(), &l.to_vec()).ok())
        .collect()
}

/// Mean of per-class AP over classes with at least one positive.
pub fn macro_ap(batch: &EvalBatch) -> Result<f64> {
    let aps: Vec<f64> = per_class_ap(batch).into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(UsatError::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

/// Fraction of samples whose top-scoring class is the labeled one.
/// Labels are one-hot rows.
pub fn accuracy(batch: &EvalBatch) -> Result<f64> {
    let n = batch.scores.nrows();
    if n == 0 {
        return Err(UsatError::Shape("empty batch".into()));
    }
    let correct = batch
        .scores
        .rows()
        .into_iter()
        .zip(batch.labels.rows())
        .filter(|(s, l)| l[argmax(*s)] > 0.5)
        .count();
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub micro_ap: Option<f64>,
    pub macro_ap: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_samples: usize,
    pub per_class_ap: Vec<Option<f64>>,
}

impl Metrics {
    pub fn compute(batch: &EvalBatch) -> Self {
        let single_label = batch.labels.rows().into_iter().all(|r| r.sum() == 1.0);
        Self {
            micro_ap: micro_ap(batch).ok(),
            macro_ap: macro_ap(batch).ok(),
            accuracy: if single_label { accuracy(batch).ok() } else { None },
            n_samples: batch.scores.nrows(),
            per_class_ap: per_class_ap(batch),
        }
    }
}
