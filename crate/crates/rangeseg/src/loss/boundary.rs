//! Boundary F-measure loss: compares pooled boundary maps of prediction
//! and target per class.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

use super::IGNORE_TARGET;

/// Stride-1 max pool with an odd kernel, windows clipped at the borders.
/// Also returns the argmax cell per output pixel (first maximum in
/// row-major window order) for gradient routing.
fn max_pool(map: &Array2<f64>, theta: usize) -> (Array2<f64>, Array2<(usize, usize)>) {
    let (h, w) = map.dim();
    let radius = theta / 2;
    let mut pooled = Array2::<f64>::zeros((h, w));
    let mut argmax = Array2::from_elem((h, w), (0usize, 0usize));
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::MIN;
            let mut at = (y, x);
            for wy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                for wx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                    if map[(wy, wx)] > best {
                        best = map[(wy, wx)];
                        at = (wy, wx);
                    }
                }
            }
            pooled[(y, x)] = best;
            argmax[(y, x)] = at;
        }
    }
    (pooled, argmax)
}

/// Boundary map of a (soft or binary) mask: `maxpool(1 - m) - (1 - m)`.
fn boundary_map(mask: &Array2<f64>, theta: usize) -> (Array2<f64>, Array2<(usize, usize)>) {
    let inverted = mask.mapv(|m| 1.0 - m);
    let (pooled, argmax) = max_pool(&inverted, theta);
    (&pooled - &inverted, argmax)
}

/// `1 - BF1` averaged over the classes present in `targets`, where BF1 is
/// the F-measure between the soft predicted boundary map and the binary
/// target boundary map. When both boundary maps are empty the class is a
/// perfect match (BF1 = 1). Ignored target pixels count as background.
/// Returns the loss and its gradient with respect to `probs`.
pub fn boundary_loss(
    probs: ArrayView3<f64>,
    targets: ArrayView2<usize>,
    theta: usize,
) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = probs.dim();
    if targets.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "targets {:?} do not match probs spatial dims ({h}, {w})",
            targets.dim()
        )));
    }
    if theta < 3 || theta % 2 == 0 {
        return Err(Error::ConfigValidation(format!(
            "boundary kernel must be odd >= 3, got {theta}"
        )));
    }

    let mut present = vec![false; c];
    for &t in targets.iter() {
        if t == IGNORE_TARGET {
            continue;
        }
        if t >= c {
            return Err(Error::Shape(format!(
                "target class {t} out of range for {c} channels"
            )));
        }
        present[t] = true;
    }

    let mut grad = Array3::<f64>::zeros((c, h, w));
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 {
        return Ok((0.0, grad));
    }

    let mut total = 0.0;
    for class in 0..c {
        if !present[class] {
            continue;
        }
        let gt = Array2::from_shape_fn((h, w), |(y, x)| {
            if targets[(y, x)] == class {
                1.0
            } else {
                0.0
            }
        });
        let (gb, _) = boundary_map(&gt, theta);
        let pred = probs.index_axis(ndarray::Axis(0), class).to_owned();
        let (pb, pb_argmax) = boundary_map(&pred, theta);

        let sum_pb: f64 = pb.iter().sum();
        let sum_gb: f64 = gb.iter().sum();
        if sum_pb == 0.0 && sum_gb == 0.0 {
            continue; // both empty: BF1 = 1, zero loss and gradient
        }
        if sum_pb == 0.0 || sum_gb == 0.0 {
            total += 1.0; // one empty: BF1 = 0, flat
            continue;
        }
        let s: f64 = pb.iter().zip(gb.iter()).map(|(p, g)| p * g).sum();
        let precision = s / sum_pb;
        let recall = s / sum_gb;
        if precision + recall <= 0.0 {
            total += 1.0;
            continue;
        }
        let bf1 = 2.0 * precision * recall / (precision + recall);
        total += 1.0 - bf1;

        let dbf1_dp = 2.0 * recall * recall / ((precision + recall) * (precision + recall));
        let dbf1_dr = 2.0 * precision * precision / ((precision + recall) * (precision + recall));
        for y in 0..h {
            for x in 0..w {
                let dp = (gb[(y, x)] * sum_pb - s) / (sum_pb * sum_pb);
                let dr = gb[(y, x)] / sum_gb;
                let dloss_dpb = -(dbf1_dp * dp + dbf1_dr * dr);
                // pb = maxpool(1 - m) - (1 - m); the pooled term routes to
                // the argmax cell, the direct term to the pixel itself.
                let (ay, ax) = pb_argmax[(y, x)];
                grad[(class, ay, ax)] -= dloss_dpb;
                grad[(class, y, x)] += dloss_dpb;
            }
        }
    }

    let inv = 1.0 / n_present as f64;
    total *= inv;
    grad.mapv_inplace(|g| g * inv);
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::gradcheck::{fd_grad3, fd_instance, relative_error};
    use ndarray::{Array2, Array3, Axis};

    fn hard_probs(targets: &Array2<usize>, c: usize) -> Array3<f64> {
        let (h, w) = targets.dim();
        let mut probs = Array3::<f64>::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                probs[(targets[(y, x)], y, x)] = 1.0;
            }
        }
        probs
    }

    #[test]
    fn identical_masks_have_zero_loss() {
        let targets = Array2::from_shape_fn((4, 4), |(y, _)| usize::from(y >= 2));
        let probs = hard_probs(&targets, 2);
        let (loss, _) = boundary_loss(probs.view(), targets.view(), 3).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn all_ones_prediction_and_target_is_zero() {
        // No boundary on either side: BF1 = 1 by convention.
        let targets = Array2::<usize>::zeros((4, 4));
        let mut probs = Array3::<f64>::zeros((1, 4, 4));
        probs.index_axis_mut(Axis(0), 0).fill(1.0);
        let (loss, grad) = boundary_loss(probs.view(), targets.view(), 3).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    /// Independent enumeration of the boundary BF1 for binary maps.
    fn oracle_bf1(pred: &Array2<f64>, gt: &Array2<f64>, theta: usize) -> f64 {
        let (h, w) = pred.dim();
        let r = theta / 2;
        let pool = |m: &Array2<f64>, y: usize, x: usize| {
            let mut best = f64::MIN;
            for wy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for wx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    best = best.max(1.0 - m[(wy, wx)]);
                }
            }
            best
        };
        let mut s = 0.0;
        let mut sum_pb = 0.0;
        let mut sum_gb = 0.0;
        for y in 0..h {
            for x in 0..w {
                let pb = pool(pred, y, x) - (1.0 - pred[(y, x)]);
                let gb = pool(gt, y, x) - (1.0 - gt[(y, x)]);
                s += pb * gb;
                sum_pb += pb;
                sum_gb += gb;
            }
        }
        if sum_pb == 0.0 && sum_gb == 0.0 {
            return 1.0;
        }
        if sum_pb == 0.0 || sum_gb == 0.0 {
            return 0.0;
        }
        let p = s / sum_pb;
        let rec = s / sum_gb;
        2.0 * p * rec / (p + rec)
    }

    #[test]
    fn one_pixel_shift_matches_enumeration_oracle() {
        // 2x2 block target, prediction shifted right by one pixel.
        let mut targets = Array2::from_elem((4, 4), IGNORE_TARGET);
        for y in 0..2 {
            for x in 0..2 {
                targets[(y, x)] = 0;
            }
        }
        for y in 0..4 {
            for x in 0..4 {
                if targets[(y, x)] == IGNORE_TARGET {
                    targets[(y, x)] = 1;
                }
            }
        }
        let mut probs = Array3::<f64>::zeros((2, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let shifted = y < 2 && (1..3).contains(&x);
                probs[(0, y, x)] = if shifted { 1.0 } else { 0.0 };
                probs[(1, y, x)] = 1.0 - probs[(0, y, x)];
            }
        }
        let (loss, _) = boundary_loss(probs.view(), targets.view(), 3).unwrap();

        let gt0 = Array2::from_shape_fn((4, 4), |(y, x)| f64::from(y < 2 && x < 2));
        let gt1 = gt0.mapv(|g| 1.0 - g);
        let pred0 = probs.index_axis(Axis(0), 0).to_owned();
        let pred1 = probs.index_axis(Axis(0), 1).to_owned();
        let expected =
            0.5 * ((1.0 - oracle_bf1(&pred0, &gt0, 3)) + (1.0 - oracle_bf1(&pred1, &gt1, 3)));
        assert!((loss - expected).abs() < 1e-12);
        assert!(loss > 0.0, "shifted prediction must cost something");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(77);
        for _ in 0..4 {
            let (probs, targets) = fd_instance(2, 5, 5, 0.0, &mut rng);
            let (_, grad) = boundary_loss(probs.view(), targets.view(), 3).unwrap();
            let fd = fd_grad3(
                |p| boundary_loss(p.view(), targets.view(), 3).unwrap().0,
                &probs,
                1e-5,
            );
            assert!(
                relative_error(grad.as_slice().unwrap(), fd.as_slice().unwrap()) < 1e-6,
                "boundary gradient mismatch"
            );
        }
    }

    #[test]
    fn even_theta_is_rejected() {
        let targets = Array2::<usize>::zeros((2, 2));
        let probs = Array3::<f64>::zeros((1, 2, 2));
        assert!(boundary_loss(probs.view(), targets.view(), 4).is_err());
    }
}
