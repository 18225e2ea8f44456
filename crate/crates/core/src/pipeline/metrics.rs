use crate::error::{Error, Result};

/// Classification quality on one labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub mf1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy and macro F1. A class whose precision and recall are both zero
/// or undefined scores F1 = 0.
pub fn evaluate_metrics(pred: &[i64], truth: &[i64], num_classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::data(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() || num_classes == 0 {
        return Err(Error::data("metrics need at least one sample and one class"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        let ok = |v: i64| (0..num_classes as i64).contains(&v);
        if !ok(p) || !ok(t) {
            return Err(Error::data(format!("label out of range: pred {p}, truth {t}")));
        }
        confusion[t as usize][p as usize] += 1;
    }
    let trace: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut f1 = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let tp = confusion[k][k] as f64;
        let predicted: usize = (0..num_classes).map(|t| confusion[t][k]).sum();
        let actual: usize = confusion[k].iter().sum();
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    Ok(Metrics {
        accuracy: trace as f64 / pred.len() as f64,
        mf1: f1.iter().sum::<f64>() / num_classes as f64,
        precision,
        recall,
        f1,
        confusion,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
