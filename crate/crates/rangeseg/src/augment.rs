//! Point-cloud augmentation: the common geometric transforms plus the
//! weighted paste/drop scheme that rebalances long-tail classes before
//! projection.
//!
//! Pasting moves real scan points from a second frame, so pasted geometry
//! keeps the sensor's scanning pattern; occlusion against the receiving
//! frame is resolved later by the projection z-buffer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kitti_io::{ClassConfig, PointCloud};
use crate::stats::{long_tail_split, ClassStats, Task, DEFAULT_LONG_TAIL_THRESHOLD};

/// Whether a weighted drop removes the whole class at once or each point
/// independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropGranularity {
    #[default]
    WholeClass,
    PerPoint,
}

/// Paste/drop composition variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PasteDropMode {
    #[default]
    PasteDrop,
    PasteOnly,
    DropOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub p_flip: f64,
    /// Uniform yaw range in radians; rotation drawn from [-rot_range, rot_range].
    pub rot_range: f64,
    /// Uniform translation per axis in meters.
    pub trans_range: f64,
    /// Independent per-point removal probability.
    pub p_point_drop: f64,
    /// Long-tail threshold t.
    pub threshold: f64,
    pub task: Task,
    pub seed: u64,
    pub drop_granularity: DropGranularity,
    pub mode: PasteDropMode,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            p_flip: 0.5,
            rot_range: std::f64::consts::PI,
            trans_range: 0.5,
            p_point_drop: 0.05,
            threshold: DEFAULT_LONG_TAIL_THRESHOLD,
            task: Task::Semantic,
            seed: 0,
            drop_granularity: DropGranularity::WholeClass,
            mode: PasteDropMode::PasteDrop,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_flip", self.p_flip),
            ("p_point_drop", self.p_point_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::ConfigValidation(format!(
                    "{name} = {p} outside [0, 1]"
                )));
            }
        }
        if self.rot_range < 0.0 {
            return Err(Error::ConfigValidation("rot_range must be >= 0".into()));
        }
        Ok(())
    }
}

/// Negate the y coordinate of every point.
pub fn flip_y(cloud: &mut PointCloud) {
    for p in &mut cloud.points {
        p.y = -p.y;
    }
}

/// Rotate all points around the z axis. Ranges are preserved.
pub fn rotate_yaw(cloud: &mut PointCloud, angle: f64) {
    let (sin, cos) = angle.sin_cos();
    for p in &mut cloud.points {
        let (x, y) = (p.x as f64, p.y as f64);
        p.x = (x * cos - y * sin) as f32;
        p.y = (x * sin + y * cos) as f32;
    }
}

/// Shift all points by a constant offset.
pub fn translate(cloud: &mut PointCloud, dx: f64, dy: f64, dz: f64) {
    for p in &mut cloud.points {
        p.x = (p.x as f64 + dx) as f32;
        p.y = (p.y as f64 + dy) as f32;
        p.z = (p.z as f64 + dz) as f32;
    }
}

/// Remove each point independently with probability `p`; labels follow
/// their points.
pub fn drop_points(cloud: &mut PointCloud, p: f64, rng: &mut impl Rng) {
    if p <= 0.0 {
        return;
    }
    let keep: Vec<bool> = (0..cloud.len()).map(|_| rng.gen::<f64>() >= p).collect();
    retain_by_mask(cloud, &keep);
}

fn retain_by_mask(cloud: &mut PointCloud, keep: &[bool]) {
    let mut idx = 0;
    cloud.points.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
    idx = 0;
    cloud.semantic.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
    idx = 0;
    cloud.instance.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
}

/// Random flip, yaw rotation, translation and point dropping, in that order.
pub fn common_augment(cloud: &PointCloud, params: &AugmentParams, rng: &mut impl Rng) -> PointCloud {
    let mut out = cloud.clone();
    if params.p_flip > 0.0 && rng.gen::<f64>() < params.p_flip {
        flip_y(&mut out);
    }
    if params.rot_range > 0.0 {
        let angle = rng.gen_range(-params.rot_range..=params.rot_range);
        rotate_yaw(&mut out, angle);
    }
    if params.trans_range > 0.0 {
        let r = params.trans_range;
        let (dx, dy, dz) = (
            rng.gen_range(-r..=r),
            rng.gen_range(-r..=r),
            rng.gen_range(-r..=r),
        );
        translate(&mut out, dx, dy, dz);
    }
    drop_points(&mut out, params.p_point_drop, rng);
    out
}

/// Candidate groups to paste: one per instance for thing classes, one per
/// class for stuff. Ordered by (class id, instance id) for determinism.
fn paste_groups(
    frame: &PointCloud,
    long_tail: &[bool],
    cfg: &ClassConfig,
) -> Vec<(u16, Vec<usize>)> {
    let mut by_class: BTreeMap<u16, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, (&sem, &inst)) in frame.semantic.iter().zip(&frame.instance).enumerate() {
        if sem == cfg.ignore_id() || sem as usize >= long_tail.len() || !long_tail[sem as usize] {
            continue;
        }
        let key = if cfg.is_thing(sem) { inst } else { 0 };
        by_class.entry(sem).or_default().entry(key).or_default().push(i);
    }
    let mut groups = Vec::new();
    for (sem, instances) in by_class {
        if cfg.is_thing(sem) {
            for (_, idxs) in instances {
                groups.push((sem, idxs));
            }
        } else {
            let all: Vec<usize> = instances.into_values().flatten().collect();
            groups.push((sem, all));
        }
    }
    groups
}

/// Paste long-tail groups from `frame2` into `frame1`, each group accepted
/// with probability `w_i - t`. Pasted groups receive fresh instance ids
/// that do not collide with `frame1`.
pub fn weighted_paste(
    frame1: &PointCloud,
    frame2: &PointCloud,
    stats: &ClassStats,
    params: &AugmentParams,
    cfg: &ClassConfig,
    rng: &mut impl Rng,
) -> PointCloud {
    let long_tail = long_tail_split(stats, params.threshold, params.task);
    let weights = stats.weights(params.task);
    let mut out = frame1.clone();
    let mut next_id = out.instance.iter().copied().max().map_or(1, |m| m + 1);

    for (sem, idxs) in paste_groups(frame2, &long_tail, cfg) {
        let p = (weights[sem as usize] - params.threshold).clamp(0.0, 1.0);
        if rng.gen::<f64>() >= p {
            continue;
        }
        let fresh = next_id;
        next_id += 1;
        for i in idxs {
            out.points.push(frame2.points[i]);
            out.semantic.push(sem);
            out.instance.push(fresh);
        }
    }
    out
}

/// Remove non-long-tail classes from `frame`, each with probability
/// `t - w_i` (whole class per draw, or per point behind the flag).
pub fn weighted_drop(
    frame: &PointCloud,
    stats: &ClassStats,
    params: &AugmentParams,
    cfg: &ClassConfig,
    rng: &mut impl Rng,
) -> PointCloud {
    let long_tail = long_tail_split(stats, params.threshold, params.task);
    let weights = stats.weights(params.task);
    let mut out = frame.clone();

    let mut present: Vec<u16> = Vec::new();
    for id in cfg.class_ids() {
        if !long_tail[id as usize] && frame.semantic.iter().any(|&s| s == id) {
            present.push(id);
        }
    }
    match params.drop_granularity {
        DropGranularity::WholeClass => {
            let mut removed = vec![false; stats.num_classes + 1];
            for id in present {
                let d = (params.threshold - weights[id as usize]).clamp(0.0, 1.0);
                if rng.gen::<f64>() < d {
                    removed[id as usize] = true;
                }
            }
            let keep: Vec<bool> = out
                .semantic
                .iter()
                .map(|&s| !removed.get(s as usize).copied().unwrap_or(false))
                .collect();
            retain_by_mask(&mut out, &keep);
        }
        DropGranularity::PerPoint => {
            let keep: Vec<bool> = out
                .semantic
                .iter()
                .map(|&s| {
                    let i = s as usize;
                    if s == cfg.ignore_id() || i >= long_tail.len() || long_tail[i] {
                        return true;
                    }
                    let d = (params.threshold - weights[i]).clamp(0.0, 1.0);
                    rng.gen::<f64>() >= d
                })
                .collect();
            retain_by_mask(&mut out, &keep);
        }
    }
    out
}

/// Full augmentation: common augmentation of both frames independently,
/// paste of long-tail groups from the second into the first, then weighted
/// drop on the result (stages selected by `params.mode`).
pub fn weighted_paste_drop(
    frame1: &PointCloud,
    frame2: &PointCloud,
    stats: &ClassStats,
    params: &AugmentParams,
    cfg: &ClassConfig,
    rng: &mut impl Rng,
) -> PointCloud {
    let a = common_augment(frame1, params, rng);
    let b = common_augment(frame2, params, rng);
    match params.mode {
        PasteDropMode::PasteDrop => {
            let pasted = weighted_paste(&a, &b, stats, params, cfg, rng);
            weighted_drop(&pasted, stats, params, cfg, rng)
        }
        PasteDropMode::PasteOnly => weighted_paste(&a, &b, stats, params, cfg, rng),
        PasteDropMode::DropOnly => weighted_drop(&a, stats, params, cfg, rng),
    }
}
