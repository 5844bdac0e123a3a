//! Post-processing: range-image KNN label cleaning for occluded points and
//! the temporal filter over per-query class logits.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::projection::{RangeImage, CH_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KnnParams {
    /// Neighbors that get a vote.
    pub k: usize,
    /// Odd search window side length in pixels.
    pub window: usize,
    /// Gaussian bandwidth over the absolute range difference, in meters.
    pub sigma: f64,
    /// Maximum absolute range difference for a candidate to vote, in meters.
    pub cutoff: f64,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams {
            k: 5,
            window: 5,
            sigma: 1.0,
            cutoff: 1.0,
        }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::ConfigValidation("knn k must be >= 1".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::ConfigValidation(format!(
                "knn window must be odd >= 1, got {}",
                self.window
            )));
        }
        if self.cutoff <= 0.0 {
            return Err(Error::ConfigValidation("knn cutoff must be > 0".into()));
        }
        Ok(())
    }
}

/// Re-label every 3D point from the pixels around its projection: keep the
/// `k` valid window pixels closest in range (within `cutoff`), weight their
/// votes by `exp(-dr^2 / (2 sigma^2))` and take the argmax class. Points
/// whose window holds no candidate inside the cutoff keep their unprojected
/// label; unprojectable points keep label 0.
pub fn knn_clean(
    range_labels: ArrayView2<u16>,
    img: &RangeImage,
    params: &KnnParams,
) -> Result<Vec<u16>> {
    params.validate()?;
    let (h, w) = (img.geometry.height, img.geometry.width);
    if range_labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "label map {:?} does not match geometry {h}x{w}",
            range_labels.dim()
        )));
    }
    let radius = params.window / 2;
    let inv_two_sigma_sq = 1.0 / (2.0 * params.sigma * params.sigma);
    let mut out = Vec::with_capacity(img.point_to_pixel.len());
    // (|dr|, v, u) candidates; the tuple order is the deterministic
    // tie-break.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();

    for proj in &img.point_to_pixel {
        let Some(p) = proj else {
            out.push(0);
            continue;
        };
        candidates.clear();
        let r_point = p.range as f64;
        for v in p.v.saturating_sub(radius)..=(p.v + radius).min(h - 1) {
            for u in p.u.saturating_sub(radius)..=(p.u + radius).min(w - 1) {
                if !img.valid[(v, u)] {
                    continue;
                }
                let dr = (img.data[(v, u, CH_RANGE)] as f64 - r_point).abs();
                if dr <= params.cutoff {
                    candidates.push((dr, v, u));
                }
            }
        }
        if candidates.is_empty() {
            out.push(range_labels[(p.v, p.u)]);
            continue;
        }
        candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite ranges"));
        let mut votes: std::collections::BTreeMap<u16, f64> = std::collections::BTreeMap::new();
        for &(dr, v, u) in candidates.iter().take(params.k) {
            let weight = (-dr * dr * inv_two_sigma_sq).exp();
            *votes.entry(range_labels[(v, u)]).or_insert(0.0) += weight;
        }
        // argmax vote; BTreeMap iteration makes ties fall to the lowest id.
        let mut best = (0u16, f64::MIN);
        for (&label, &weight) in &votes {
            if weight > best.1 {
                best = (label, weight);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Sliding window of per-query class logits over consecutive frames.
/// Single-owner state: one window per sequence stream.
#[derive(Debug, Clone)]
pub struct TemporalWindow {
    pub k_prev: usize,
    pub l_next: usize,
    buffer: VecDeque<Array2<f64>>,
}

impl TemporalWindow {
    pub fn new(k_prev: usize, l_next: usize) -> Self {
        TemporalWindow {
            k_prev,
            l_next,
            buffer: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.k_prev + self.l_next + 1
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Push one frame's `(Q, K + 1)` class logits, evicting the oldest
    /// frame beyond the window capacity.
    pub fn push(&mut self, class_logits: Array2<f64>) -> Result<()> {
        if let Some(front) = self.buffer.front() {
            if front.dim() != class_logits.dim() {
                return Err(Error::Shape(format!(
                    "class logits {:?} do not match the window's {:?}",
                    class_logits.dim(),
                    front.dim()
                )));
            }
        }
        self.buffer.push_back(class_logits);
        while self.buffer.len() > self.capacity() {
            self.buffer.pop_front();
        }
        Ok(())
    }
}

/// Arithmetic mean of the buffered logits, per query slot. Query identity
/// across frames is positional.
pub fn temporal_filter(window: &TemporalWindow) -> Result<Array2<f64>> {
    let first = window
        .buffer
        .front()
        .ok_or_else(|| Error::State("temporal window is empty".into()))?;
    let mut mean = Array2::<f64>::zeros(first.raw_dim());
    for frame in &window.buffer {
        mean += frame;
    }
    mean.mapv_inplace(|v| v / window.buffer.len() as f64);
    Ok(mean)
}

/// Probability-space variant: softmax each buffered frame per query, average
/// the probabilities and return their logarithms (valid logits for any
/// downstream softmax).
pub fn temporal_filter_probs(window: &TemporalWindow) -> Result<Array2<f64>> {
    let first = window
        .buffer
        .front()
        .ok_or_else(|| Error::State("temporal window is empty".into()))?;
    let (q, c) = first.dim();
    let mut mean = Array2::<f64>::zeros((q, c));
    for frame in &window.buffer {
        for qi in 0..q {
            let row = frame.row(qi);
            let max = row.fold(f64::MIN, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (ci, e) in exps.iter().enumerate() {
                mean[(qi, ci)] += e / z;
            }
        }
    }
    let n = window.buffer.len() as f64;
    mean.mapv_inplace(|v| (v / n).ln());
    Ok(mean)
}
