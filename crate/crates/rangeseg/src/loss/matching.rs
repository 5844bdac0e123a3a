//! Matching cost between query predictions and ground-truth segments, and
//! minimum-cost bipartite assignment.

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

use super::lovasz::binary_lovasz_cost;
use super::{MaskTarget, PROB_FLOOR};

/// Mixing weights for the mask terms of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub focal: f64,
    pub lovasz: f64,
    pub gamma: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            focal: 1.0,
            lovasz: 1.0,
            gamma: 2.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary focal cost of a soft mask against a binary target.
fn binary_focal_cost(soft_mask: &[f64], target: &[bool], gamma: f64) -> f64 {
    let mut total = 0.0;
    for (&m, &t) in soft_mask.iter().zip(target) {
        let p = if t { m } else { 1.0 - m }.max(PROB_FLOOR);
        total += -(1.0 - p).max(0.0).powf(gamma) * p.ln();
    }
    total / soft_mask.len().max(1) as f64
}

/// Build the `Q x T` assignment cost:
/// `cost[q][t] = -p_q(class_t) + w_focal * focal(sigmoid(mask_q), mask_t)
///             + w_lovasz * lovasz(sigmoid(mask_q), mask_t)`.
pub fn matching_cost(
    class_probs: ArrayView2<f64>,
    mask_logits: ArrayView3<f64>,
    targets: &[MaskTarget],
    weights: &MatchWeights,
) -> Result<Array2<f64>> {
    let (q, classes) = class_probs.dim();
    let (qm, h, w) = mask_logits.dim();
    if qm != q {
        return Err(Error::Shape(format!(
            "{qm} mask rows for {q} class rows"
        )));
    }
    if targets.len() > q {
        return Err(Error::OverSubscribed {
            count: targets.len(),
            queries: q,
        });
    }
    for (i, t) in targets.iter().enumerate() {
        if t.mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "target {i} mask {:?} does not match mask logits ({h}, {w})",
                t.mask.dim()
            )));
        }
        if t.class_id + 1 >= classes {
            return Err(Error::Shape(format!(
                "target {i} class {} out of range (no-object column is last)",
                t.class_id
            )));
        }
    }

    let mut cost = Array2::<f64>::zeros((q, targets.len()));
    for qi in 0..q {
        let soft: Vec<f64> = mask_logits
            .index_axis(ndarray::Axis(0), qi)
            .iter()
            .map(|&l| sigmoid(l))
            .collect();
        for (ti, target) in targets.iter().enumerate() {
            let flat: Vec<bool> = target.mask.iter().copied().collect();
            let mut c = -class_probs[(qi, target.class_id)];
            c += weights.focal * binary_focal_cost(&soft, &flat, weights.gamma);
            c += weights.lovasz * binary_lovasz_cost(&soft, &flat);
            if !c.is_finite() {
                return Err(Error::NonFinite(format!("matching cost ({qi}, {ti})")));
            }
            cost[(qi, ti)] = c;
        }
    }
    Ok(cost)
}

/// Minimum-total-cost injection of targets (columns) into queries (rows) on
/// a `Q x T` matrix with `T <= Q`, via shortest augmenting paths with
/// potentials. Returns `(query, target)` pairs sorted by target index.
pub fn hungarian_match(cost: ArrayView2<f64>) -> Result<Vec<(usize, usize)>> {
    let (q, t) = cost.dim();
    if t > q {
        return Err(Error::OverSubscribed {
            count: t,
            queries: q,
        });
    }
    if t == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost matrix".into()));
    }

    // Rows of the internal problem are targets, columns are queries;
    // 1-based with column 0 as the sentinel.
    let n = t;
    let m = q;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched_target = vec![0usize; m + 1]; // target occupying a query column
    let mut way = vec![0usize; m + 1];

    for target in 1..=n {
        matched_target[0] = target;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let t0 = matched_target[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[(j - 1, t0 - 1)] - u[t0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_target[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_target[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            matched_target[j0] = matched_target[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| matched_target[j] != 0)
        .map(|j| (j - 1, matched_target[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, target)| target);
    Ok(pairs)
}

/// Total cost of an assignment, summed in ascending target order.
pub fn assignment_cost(cost: ArrayView2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut sorted: Vec<_> = pairs.to_vec();
    sorted.sort_by_key(|&(_, t)| t);
    sorted.iter().map(|&(q, t)| cost[(q, t)]).sum()
}
