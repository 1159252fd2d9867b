use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, macro-F1 (classes with no support or no correct prediction
/// contribute 0) and the confusion matrix.
pub fn evaluate_metrics(predictions: &[usize], labels: &[usize], k: usize) -> Result<Metrics, TrainError> {
    if predictions.len() != labels.len() {
        return Err(TrainError::Config(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= k) {
        return Err(TrainError::Config(format!("class {bad} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
    let mut f1_sum = 0.0;
    #[allow(clippy::needless_range_loop)] // row and column of the same class
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if tp > 0.0 {
            let precision = tp / predicted as f64;
            let recall = tp / actual as f64;
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(Metrics { accuracy, macro_f1: f1_sum / k as f64, confusion })
}
