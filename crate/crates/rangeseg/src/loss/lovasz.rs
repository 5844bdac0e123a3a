//! Lovász extension of the Jaccard loss over softmax probabilities.

use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

use super::IGNORE_TARGET;

/// Gradient of the Jaccard extension for a descending-error ordering of the
/// foreground indicator vector.
pub(crate) fn lovasz_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let n = fg_sorted.len();
    let gts: f64 = fg_sorted.iter().sum();
    let mut jaccard = vec![0.0; n];
    let mut intersection = gts;
    let mut union = gts;
    for i in 0..n {
        intersection -= fg_sorted[i];
        union += 1.0 - fg_sorted[i];
        jaccard[i] = if union > 0.0 {
            1.0 - intersection / union
        } else {
            0.0
        };
    }
    for i in (1..n).rev() {
        jaccard[i] -= jaccard[i - 1];
    }
    jaccard
}

/// Sort errors descending and take the inner product with the Jaccard
/// gradient. Returns the per-class loss plus, for each flat pixel index,
/// the derivative of the loss with respect to that pixel's error.
fn lovasz_extension(errors: &[f64], fg: &[f64]) -> (f64, Vec<f64>) {
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable tie-break on the pixel index keeps the result deterministic.
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));
    let fg_sorted: Vec<f64> = order.iter().map(|&i| fg[i]).collect();
    let g = lovasz_grad(&fg_sorted);
    let mut loss = 0.0;
    let mut d_err = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        loss += errors[i] * g[rank];
        d_err[i] = g[rank];
    }
    (loss, d_err)
}

/// Per-class Lovász-Jaccard loss averaged over the classes present in the
/// targets; ignored pixels are excluded. Returns the loss and its gradient
/// with respect to `probs`.
pub fn lovasz_softmax(
    probs: ArrayView3<f64>,
    targets: ArrayView2<usize>,
) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = probs.dim();
    if targets.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "targets {:?} do not match probs spatial dims ({h}, {w})",
            targets.dim()
        )));
    }
    // Valid pixel list in row-major order.
    let mut pixels = Vec::new();
    let mut present = vec![false; c];
    for y in 0..h {
        for x in 0..w {
            let t = targets[(y, x)];
            if t == IGNORE_TARGET {
                continue;
            }
            if t >= c {
                return Err(Error::Shape(format!(
                    "target class {t} out of range for {c} channels"
                )));
            }
            present[t] = true;
            pixels.push((y, x, t));
        }
    }

    let mut grad = Array3::<f64>::zeros((c, h, w));
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 || pixels.is_empty() {
        return Ok((0.0, grad));
    }

    let mut total = 0.0;
    for class in 0..c {
        if !present[class] {
            continue;
        }
        let fg: Vec<f64> = pixels
            .iter()
            .map(|&(_, _, t)| if t == class { 1.0 } else { 0.0 })
            .collect();
        let p: Vec<f64> = pixels.iter().map(|&(y, x, _)| probs[(class, y, x)]).collect();
        let errors: Vec<f64> = fg.iter().zip(&p).map(|(f, p)| (f - p).abs()).collect();
        let (loss_c, d_err) = lovasz_extension(&errors, &fg);
        total += loss_c;
        for (k, &(y, x, _)) in pixels.iter().enumerate() {
            // d|fg - p|/dp = sign(p - fg)
            let sign = if p[k] >= fg[k] { 1.0 } else { -1.0 };
            grad[(class, y, x)] += d_err[k] * sign;
        }
    }

    let inv = 1.0 / n_present as f64;
    total *= inv;
    grad.mapv_inplace(|g| g * inv);
    Ok((total, grad))
}

/// Binary Lovász-Jaccard cost between a soft mask and a binary target,
/// used inside the matching cost.
pub(crate) fn binary_lovasz_cost(soft_mask: &[f64], target: &[bool]) -> f64 {
    let fg: Vec<f64> = target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let errors: Vec<f64> = fg
        .iter()
        .zip(soft_mask)
        .map(|(f, m)| (f - m).abs())
        .collect();
    lovasz_extension(&errors, &fg).0
}
