//! Re-balanced focal loss over per-pixel class probabilities.

use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

use super::{LossWeights, IGNORE_TARGET, PROB_FLOOR};

/// Mean over non-ignored pixels of `-w_i (1 - p_t)^gamma ln(p_t)` where `i`
/// is the pixel's target class, `p_t` its predicted probability and `w_i`
/// the strategy-selected re-balance weight. Returns the loss and its
/// gradient with respect to `probs` (nonzero only at target entries).
///
/// Target probabilities of zero are clamped to [`PROB_FLOOR`] so no NaN can
/// escape; the clamp count is logged.
pub fn weighted_focal_loss(
    probs: ArrayView3<f64>,
    targets: ArrayView2<usize>,
    weights: &LossWeights,
) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = probs.dim();
    if targets.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "targets {:?} do not match probs spatial dims ({h}, {w})",
            targets.dim()
        )));
    }
    let gamma = weights.gamma;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    let mut total = 0.0;
    let mut count = 0usize;
    let mut clamped = 0usize;

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
            count += 1;
            let wgt = weights.class_weight(t);
            let mut p = probs[(t, y, x)];
            if p < PROB_FLOOR {
                p = PROB_FLOOR;
                clamped += 1;
            }
            let q = (1.0 - p).max(0.0);
            let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
            total += -wgt * qg * p.ln();
            // d/dp [-w (1-p)^g ln p] = -w [ (1-p)^g / p - g (1-p)^(g-1) ln p ]
            let modulating = if gamma == 0.0 || q == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * p.ln()
            };
            grad[(t, y, x)] = -wgt * (qg / p - modulating);
        }
    }

    if clamped > 0 {
        log::warn!("focal loss clamped {clamped} zero target probabilities");
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        total *= inv;
        grad.mapv_inplace(|g| g * inv);
    }
    Ok((total, grad))
}
