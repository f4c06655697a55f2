//! Small deterministic numeric kernel: dense matrices, stable softmax, and a
//! seeded RNG with tag-derived substreams.
//!
//! Everything here is written for reproducibility first: reductions run in a
//! fixed order, and random streams are derived from `(seed, tags)` alone so
//! results are bit-identical across runs and across checkpoint restores.

mod matrix;
mod rng;

pub use matrix::{add_outer, dot, Matrix};
pub use rng::RngStream;

use crate::error::{Error, Result};

/// Numerically stable softmax: subtracts the max before exponentiating.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty slice".into()));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax_stable".into(),
            detail: format!("logit {bad}"),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Largest index-ordered values: returns the indices of the `k` largest
/// entries, ties resolved toward the lowest index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps the lowest index first among equal values.
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    idx.truncate(k);
    idx
}
