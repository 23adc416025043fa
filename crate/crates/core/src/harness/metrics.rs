use serde::{Deserialize, Serialize};

use crate::streams::histogram;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-class recall over classes present in the labels.
    pub mean_class_acc: f64,
    pub overall_acc: f64,
    /// Number of predictions per class.
    pub counts: Vec<usize>,
    /// Population standard deviation of `counts` over all classes.
    pub std: f64,
    /// `max(counts) - min(counts)`.
    pub range: usize,
}

pub fn metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.iter().chain(labels).any(|&k| k >= classes) {
        return Err(Error::Input(format!("class index outside [0, {classes})")));
    }
    let mut hits = vec![0usize; classes];
    let support = histogram(labels, classes);
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            hits[y] += 1;
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&k| support[k] > 0).collect();
    let mean_class_acc = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|&k| hits[k] as f64 / support[k] as f64).sum::<f64>() / present.len() as f64
    };
    let overall_acc = if labels.is_empty() {
        0.0
    } else {
        hits.iter().sum::<usize>() as f64 / labels.len() as f64
    };
    let counts = histogram(predictions, classes);
    let mean = counts.iter().sum::<usize>() as f64 / classes as f64;
    let std = (counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / classes as f64).sqrt();
    let range = counts.iter().max().copied().unwrap_or(0) - counts.iter().min().copied().unwrap_or(0);
    Ok(Metrics { mean_class_acc, overall_acc, counts, std, range })
}
