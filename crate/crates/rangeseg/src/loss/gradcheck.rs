//! Central finite-difference gradient verification, used by the test
//! suites and by the loss-audit command.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use super::IGNORE_TARGET;

/// Central finite differences over every entry of a 3D input.
pub fn fd_grad3(mut f: impl FnMut(&Array3<f64>) -> f64, x: &Array3<f64>, step: f64) -> Array3<f64> {
    let mut probe = x.clone();
    let mut grad = Array3::<f64>::zeros(x.raw_dim());
    let dims: Vec<_> = x.indexed_iter().map(|(i, _)| i).collect();
    for idx in dims {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let fp = f(&probe);
        probe[idx] = orig - step;
        let fm = f(&probe);
        probe[idx] = orig;
        grad[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Central finite differences over every entry of a 2D input.
pub fn fd_grad2(mut f: impl FnMut(&Array2<f64>) -> f64, x: &Array2<f64>, step: f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut grad = Array2::<f64>::zeros(x.raw_dim());
    let dims: Vec<_> = x.indexed_iter().map(|(i, _)| i).collect();
    for idx in dims {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let fp = f(&probe);
        probe[idx] = orig - step;
        let fm = f(&probe);
        probe[idx] = orig;
        grad[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// `||a - b||_2 / max(||a||_2, ||b||_2, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

/// A spatial map whose values are a random permutation of an evenly spaced
/// grid inside `(lo, hi)`, plus jitter much smaller than the grid step.
///
/// The guaranteed pairwise separation keeps finite differences away from
/// the sort and max-pool kinks of the piecewise-linear losses.
pub fn jittered_grid_map(h: usize, w: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Array2<f64> {
    let n = h * w;
    let step = (hi - lo) / n as f64;
    let mut values: Vec<f64> = (0..n)
        .map(|i| lo + (i as f64 + 0.5) * step + rng.gen_range(-0.2..0.2) * step)
        .collect();
    values.shuffle(rng);
    Array2::from_shape_vec((h, w), values).expect("shape matches length")
}

/// Random loss instance for gradient checks: per-channel probability maps
/// with guaranteed value separation (see [`jittered_grid_map`]) and random
/// targets. Values stay in `(0.02, 0.44)` so that the per-class error
/// magnitudes `p` and `1 - p` can never collide either.
pub fn fd_instance(
    channels: usize,
    h: usize,
    w: usize,
    ignore_fraction: f64,
    rng: &mut impl Rng,
) -> (Array3<f64>, Array2<usize>) {
    let mut probs = Array3::<f64>::zeros((channels, h, w));
    for c in 0..channels {
        probs
            .index_axis_mut(ndarray::Axis(0), c)
            .assign(&jittered_grid_map(h, w, 0.02, 0.44, rng));
    }
    let targets = Array2::from_shape_fn((h, w), |_| {
        if rng.gen::<f64>() < ignore_fraction {
            IGNORE_TARGET
        } else {
            rng.gen_range(0..channels)
        }
    });
    (probs, targets)
}
