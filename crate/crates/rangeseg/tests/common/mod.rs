//! Shared fixtures and independent oracles for the integration suites.
//! Each suite uses its own subset.
#![allow(dead_code)]

use ndarray::ArrayView2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use rangeseg::kitti_io::{load_class_config, ClassConfig, Point, PointCloud};
use rangeseg::stats::{finalize_from_fixture, ClassStats};

pub fn kitti_config() -> ClassConfig {
    load_class_config(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/data/semantic-kitti.toml"
    ))
    .expect("bundled class config parses")
}

pub fn published_stats(cfg: &ClassConfig) -> ClassStats {
    finalize_from_fixture(
        concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/data/semantic-kitti-published-stats.toml"
        ),
        cfg,
    )
    .expect("published fixture finalizes")
}

/// Published per-class alpha factors, train-id order 1..=19.
pub const PUBLISHED_ALPHA: [f64; 19] = [
    22.93, 857.56, 715.11, 315.96, 356.25, 747.62, 887.22, 963.89, 5.01, 63.62, 6.9, 203.88,
    7.48, 13.63, 3.73, 142.15, 12.64, 259.37, 618.97,
];

/// Published normalized semantic weights, train-id order 1..=19.
pub const PUBLISHED_W_SEM: [f64; 19] = [
    0.02, 0.89, 0.74, 0.33, 0.37, 0.78, 0.92, 1.0, 0.01, 0.07, 0.01, 0.21, 0.01, 0.01, 0.0,
    0.15, 0.01, 0.27, 0.64,
];

/// Published normalized panoptic weights, train-id order 1..=19.
pub const PUBLISHED_W_PAN: [f64; 19] = [
    0.13, 1.0, 0.53, 0.22, 0.33, 0.78, 0.69, 0.6, 0.0, 0.04, 0.0, 0.13, 0.0, 0.01, 0.0, 0.09,
    0.01, 0.16, 0.38,
];

/// The semantic long-tail class list stated alongside the statistics.
pub const SEMANTIC_LONG_TAIL: [&str; 11] = [
    "motorcyclist",
    "bicyclist",
    "bicycle",
    "person",
    "motorcycle",
    "traffic-sign",
    "other-vehicle",
    "truck",
    "pole",
    "other-ground",
    "trunk",
];

/// The panoptic long-tail class list stated alongside the statistics.
pub const PANOPTIC_LONG_TAIL: [&str; 11] = [
    "bicycle",
    "person",
    "bicyclist",
    "motorcyclist",
    "motorcycle",
    "traffic-sign",
    "other-vehicle",
    "truck",
    "pole",
    "car",
    "other-ground",
];

/// Random outdoor-ish cloud: full azimuth sweep, 2-50 m ranges.
pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::from_points(
        (0..n)
            .map(|_| {
                let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let r = rng.gen_range(2.0..50.0f64);
                let z = rng.gen_range(-3.0..1.5f64);
                Point::new(
                    (r * yaw.cos()) as f32,
                    (r * yaw.sin()) as f32,
                    z as f32,
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect(),
    )
}

/// Exhaustive minimum assignment cost over all injections of targets
/// (columns) into queries (rows).
pub fn brute_force_assignment(cost: ArrayView2<f64>) -> f64 {
    fn recurse(cost: &ArrayView2<f64>, target: usize, used: &mut Vec<bool>, acc: f64) -> f64 {
        if target == cost.dim().1 {
            return acc;
        }
        let mut best = f64::INFINITY;
        for q in 0..cost.dim().0 {
            if used[q] {
                continue;
            }
            used[q] = true;
            best = best.min(recurse(cost, target + 1, used, acc + cost[(q, target)]));
            used[q] = false;
        }
        best
    }
    let (q, t) = cost.dim();
    assert!(t <= q);
    recurse(&cost, 0, &mut vec![false; q], 0.0)
}

/// Wall-clock guard: runs the body, prints the acceptance line, and
/// enforces the stated runtime budget.
pub fn criterion(name: &str, budget_secs: f64, body: impl FnOnce()) {
    let start = std::time::Instant::now();
    body();
    let elapsed = start.elapsed().as_secs_f64();
    println!("[PASS] {name} ({elapsed:.2}s, budget {budget_secs}s)");
    assert!(
        elapsed < budget_secs,
        "{name} exceeded its runtime budget: {elapsed:.2}s >= {budget_secs}s"
    );
}
