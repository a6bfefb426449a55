//! Classification metrics: accuracy, per-class F1, and support-weighted F1.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// Harmonic mean of precision and recall per class; 0 when undefined.
    pub per_class_f1: Vec<f64>,
    /// F1 averaged with per-class support as weights. Classes absent from
    /// the labels carry zero weight.
    pub weighted_f1: f64,
}

/// Score predictions against labels over `classes` classes.
pub fn evaluate(preds: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot score an empty prediction set".into(),
        ));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels.iter()) {
        if p >= classes || y >= classes {
            return Err(Error::InvalidArgument(format!(
                "class index out of range: prediction {p}, label {y}, classes {classes}"
            )));
        }
        confusion[y][p] += 1;
    }
    let n = preds.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / n as f64;

    let mut per_class_f1 = vec![0.0; classes];
    let mut weighted = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..classes).map(|y| confusion[y][c]).sum();
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1[c] = f1;
        weighted += support as f64 * f1;
    }
    Ok(Metrics {
        confusion,
        accuracy,
        per_class_f1,
        weighted_f1: weighted / n as f64,
    })
}

// ===== Tests =====
