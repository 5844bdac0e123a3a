//! Cross-entropy over per-query class logits, with a down-weighted
//! no-object class for unmatched queries.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

use super::LossWeights;

/// Expand a matching into per-query targets: matched queries point at their
/// target's class channel, the rest at `no_object_class`.
pub fn assignment_to_targets(
    matches: &[(usize, usize)],
    target_classes: &[usize],
    num_queries: usize,
    no_object_class: usize,
) -> Vec<usize> {
    let mut targets = vec![no_object_class; num_queries];
    for &(q, t) in matches {
        targets[q] = target_classes[t];
    }
    targets
}

/// Mean over queries of softmax cross-entropy against the per-query target
/// class. No-object terms are scaled by `weights.no_object_weight`.
/// Returns the loss and its gradient with respect to the logits.
pub fn classification_loss(
    class_logits: ArrayView2<f64>,
    per_query_target: &[usize],
    weights: &LossWeights,
) -> Result<(f64, Array2<f64>)> {
    let (q, classes) = class_logits.dim();
    if per_query_target.len() != q {
        return Err(Error::Shape(format!(
            "{} targets for {q} queries",
            per_query_target.len()
        )));
    }
    let no_object = classes - 1;
    let mut grad = Array2::<f64>::zeros((q, classes));
    let mut total = 0.0;

    for (qi, &target) in per_query_target.iter().enumerate() {
        if target >= classes {
            return Err(Error::Shape(format!(
                "target class {target} out of range for {classes} columns"
            )));
        }
        let row = class_logits.row(qi);
        let max = row.fold(f64::MIN, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let w = if target == no_object {
            weights.no_object_weight
        } else {
            1.0
        };
        total += w * (z.ln() - (class_logits[(qi, target)] - max));
        for j in 0..classes {
            let softmax = exps[j] / z;
            let indicator = if j == target { 1.0 } else { 0.0 };
            grad[(qi, j)] = w * (softmax - indicator);
        }
    }

    let inv = 1.0 / q.max(1) as f64;
    total *= inv;
    grad.mapv_inplace(|g| g * inv);
    Ok((total, grad))
}
