//! Softmax and cross-entropy on plain vectors.

use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln(sum(exp(z)))` without overflow.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(z)[label]`.
pub fn cross_entropy_loss(z: &[f64], label: usize) -> Result<f64> {
    if label >= z.len() {
        return Err(Error::arg(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    Ok(log_sum_exp(z) - z[label])
}

/// Loss and the softmax probabilities it was computed from.
pub(crate) fn softmax_cross_entropy(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    (log_sum_exp(z) - z[label], softmax(z))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
