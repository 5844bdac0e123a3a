//! Per-class dataset statistics and the unified re-balance weights derived
//! from them: point proportions, frame/instance counts, alpha and beta
//! factors, normalized semantic/panoptic weights and the long-tail split.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kitti_io::{ClassConfig, PointCloud};

/// Segmentation task flavor; selects which normalized weight row applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Semantic,
    Panoptic,
}

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_LONG_TAIL_THRESHOLD: f64 = 0.1;

/// Mergeable counting state; one per worker during parallel dataset scans.
/// All vectors are indexed by train id (slot `ignore_id` stays zero).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsAccumulator {
    num_classes: usize,
    point_counts: Vec<u64>,
    frame_counts: Vec<u64>,
    instance_counts: Vec<u64>,
    total_points: u64,
}

impl StatsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        StatsAccumulator {
            num_classes,
            point_counts: vec![0; num_classes + 1],
            frame_counts: vec![0; num_classes + 1],
            instance_counts: vec![0; num_classes + 1],
            total_points: 0,
        }
    }

    /// Count one labeled frame: per-class points, frame presence, and
    /// distinct instances (presence only for stuff). Ignore-id points are
    /// skipped entirely.
    pub fn accumulate_frame(&mut self, cloud: &PointCloud, cfg: &ClassConfig) {
        let mut present = vec![false; self.num_classes + 1];
        let mut instances: HashSet<(u16, u32)> = HashSet::new();
        for (sem, inst) in cloud.semantic.iter().zip(&cloud.instance) {
            let id = *sem;
            if id == cfg.ignore_id() || id as usize > self.num_classes {
                continue;
            }
            self.point_counts[id as usize] += 1;
            self.total_points += 1;
            present[id as usize] = true;
            if cfg.is_thing(id) {
                instances.insert((id, *inst));
            }
        }
        for id in cfg.class_ids() {
            if present[id as usize] {
                self.frame_counts[id as usize] += 1;
                if !cfg.is_thing(id) {
                    // Stuff counts one "instance" per frame it appears in.
                    self.instance_counts[id as usize] += 1;
                }
            }
        }
        for (id, _) in instances {
            self.instance_counts[id as usize] += 1;
        }
    }

    /// Element-wise sum; merging shards equals accumulating the concatenated
    /// stream.
    pub fn merge(&mut self, other: &StatsAccumulator) {
        assert_eq!(self.num_classes, other.num_classes);
        for i in 0..=self.num_classes {
            self.point_counts[i] += other.point_counts[i];
            self.frame_counts[i] += other.frame_counts[i];
            self.instance_counts[i] += other.instance_counts[i];
        }
        self.total_points += other.total_points;
    }

    pub fn total_points(&self) -> u64 {
        self.total_points
    }
}

/// Finalized per-class statistics. Vectors indexed by train id; the ignore
/// slot carries zeros (weights) and ones (factors) and is never consulted.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub num_classes: usize,
    pub eps: f64,
    pub total_points: u64,
    /// Point-count proportion per class.
    pub f: Vec<f64>,
    /// Frames containing the class ("semantic segments").
    pub sem: Vec<u64>,
    /// Total instance count (equals `sem` for stuff).
    pub ins: Vec<u64>,
    /// Semantic re-balance factor `1 / (f + eps)`.
    pub alpha: Vec<f64>,
    /// Panoptic re-balance factor `ins / sem`, forced to 1 for stuff.
    pub beta: Vec<f64>,
    /// Normalized semantic weights, max = 1.
    pub w_sem: Vec<f64>,
    /// Normalized panoptic weights, max = 1.
    pub w_pan: Vec<f64>,
    /// Long-tail flags at the default threshold.
    pub long_tail_sem: Vec<bool>,
    pub long_tail_pan: Vec<bool>,
}

impl ClassStats {
    pub fn weight(&self, task: Task, id: u16) -> f64 {
        match task {
            Task::Semantic => self.w_sem[id as usize],
            Task::Panoptic => self.w_pan[id as usize],
        }
    }

    pub fn weights(&self, task: Task) -> &[f64] {
        match task {
            Task::Semantic => &self.w_sem,
            Task::Panoptic => &self.w_pan,
        }
    }

    pub fn long_tail(&self, task: Task) -> &[bool] {
        match task {
            Task::Semantic => &self.long_tail_sem,
            Task::Panoptic => &self.long_tail_pan,
        }
    }
}

/// Derive factors and normalized weights from accumulated counts.
pub fn finalize(acc: &StatsAccumulator, eps: f64, cfg: &ClassConfig) -> Result<ClassStats> {
    if acc.total_points == 0 {
        return Err(Error::EmptyDataset(
            "no labeled points accumulated".into(),
        ));
    }
    let f: Vec<f64> = acc
        .point_counts
        .iter()
        .map(|&c| c as f64 / acc.total_points as f64)
        .collect();
    finalize_from_proportions(
        &f,
        &acc.instance_counts,
        &acc.frame_counts,
        eps,
        cfg,
        acc.total_points,
    )
}

/// Same derivation, but starting from externally provided proportions (for
/// example the published dataset table) instead of recounted points.
pub fn finalize_from_proportions(
    f: &[f64],
    ins: &[u64],
    sem: &[u64],
    eps: f64,
    cfg: &ClassConfig,
    total_points: u64,
) -> Result<ClassStats> {
    let k = cfg.num_classes();
    if f.len() != k + 1 || ins.len() != k + 1 || sem.len() != k + 1 {
        return Err(Error::Shape(format!(
            "statistics arrays must have length {} (train ids 0..={k})",
            k + 1
        )));
    }

    let mut alpha = vec![1.0; k + 1];
    let mut beta = vec![1.0; k + 1];
    for id in cfg.class_ids() {
        let i = id as usize;
        alpha[i] = 1.0 / (f[i] + eps);
        beta[i] = if cfg.is_thing(id) && sem[i] > 0 {
            ins[i] as f64 / sem[i] as f64
        } else {
            1.0
        };
    }

    let max_alpha = cfg
        .class_ids()
        .map(|id| alpha[id as usize])
        .fold(f64::MIN, f64::max);
    let max_ab = cfg
        .class_ids()
        .map(|id| alpha[id as usize] * beta[id as usize])
        .fold(f64::MIN, f64::max);

    let mut w_sem = vec![0.0; k + 1];
    let mut w_pan = vec![0.0; k + 1];
    for id in cfg.class_ids() {
        let i = id as usize;
        w_sem[i] = alpha[i] / max_alpha;
        w_pan[i] = alpha[i] * beta[i] / max_ab;
    }

    let mut stats = ClassStats {
        num_classes: k,
        eps,
        total_points,
        f: f.to_vec(),
        sem: sem.to_vec(),
        ins: ins.to_vec(),
        alpha,
        beta,
        w_sem,
        w_pan,
        long_tail_sem: Vec::new(),
        long_tail_pan: Vec::new(),
    };
    stats.long_tail_sem = long_tail_split(&stats, DEFAULT_LONG_TAIL_THRESHOLD, Task::Semantic);
    stats.long_tail_pan = long_tail_split(&stats, DEFAULT_LONG_TAIL_THRESHOLD, Task::Panoptic);
    Ok(stats)
}

/// Flag classes whose normalized weight strictly exceeds the threshold.
pub fn long_tail_split(stats: &ClassStats, threshold: f64, task: Task) -> Vec<bool> {
    stats
        .weights(task)
        .iter()
        .map(|&w| w > threshold)
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsDoc {
    num_classes: usize,
    eps: f64,
    total_points: u64,
    class: Vec<ClassRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassRow {
    id: u16,
    name: String,
    f: f64,
    frames: u64,
    instances: u64,
    alpha: f64,
    beta: f64,
    w_sem: f64,
    w_pan: f64,
    long_tail_sem: bool,
    long_tail_pan: bool,
}

/// Serialize finalized statistics to a human-readable document so the
/// augmentation and loss stages can run without rescanning the dataset.
pub fn save_stats(path: impl AsRef<Path>, stats: &ClassStats, cfg: &ClassConfig) -> Result<()> {
    let path = path.as_ref();
    let doc = StatsDoc {
        num_classes: stats.num_classes,
        eps: stats.eps,
        total_points: stats.total_points,
        class: cfg
            .class_ids()
            .map(|id| {
                let i = id as usize;
                ClassRow {
                    id,
                    name: cfg.name(id).to_string(),
                    f: stats.f[i],
                    frames: stats.sem[i],
                    instances: stats.ins[i],
                    alpha: stats.alpha[i],
                    beta: stats.beta[i],
                    w_sem: stats.w_sem[i],
                    w_pan: stats.w_pan[i],
                    long_tail_sem: stats.long_tail_sem[i],
                    long_tail_pan: stats.long_tail_pan[i],
                }
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&doc).map_err(|e| Error::State(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<ClassStats> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: StatsDoc = toml::from_str(&text).map_err(|e| Error::State(e.to_string()))?;
    let k = doc.num_classes;
    let mut stats = ClassStats {
        num_classes: k,
        eps: doc.eps,
        total_points: doc.total_points,
        f: vec![0.0; k + 1],
        sem: vec![0; k + 1],
        ins: vec![0; k + 1],
        alpha: vec![1.0; k + 1],
        beta: vec![1.0; k + 1],
        w_sem: vec![0.0; k + 1],
        w_pan: vec![0.0; k + 1],
        long_tail_sem: vec![false; k + 1],
        long_tail_pan: vec![false; k + 1],
    };
    for row in doc.class {
        let i = row.id as usize;
        if i > k {
            return Err(Error::State(format!(
                "stats row id {} outside 0..={k}",
                row.id
            )));
        }
        stats.f[i] = row.f;
        stats.sem[i] = row.frames;
        stats.ins[i] = row.instances;
        stats.alpha[i] = row.alpha;
        stats.beta[i] = row.beta;
        stats.w_sem[i] = row.w_sem;
        stats.w_pan[i] = row.w_pan;
        stats.long_tail_sem[i] = row.long_tail_sem;
        stats.long_tail_pan[i] = row.long_tail_pan;
    }
    Ok(stats)
}

#[derive(Debug, Deserialize)]
struct ProportionsDoc {
    eps: Option<f64>,
    class: Vec<ProportionRow>,
}

#[derive(Debug, Deserialize)]
struct ProportionRow {
    id: u16,
    #[allow(dead_code)]
    name: Option<String>,
    f: f64,
    frames: u64,
    instances: u64,
}

/// Load a published-proportions fixture (f, instance and frame counts) and
/// run the normal finalize path over it.
pub fn finalize_from_fixture(path: impl AsRef<Path>, cfg: &ClassConfig) -> Result<ClassStats> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ProportionsDoc = toml::from_str(&text).map_err(|e| Error::State(e.to_string()))?;
    let k = cfg.num_classes();
    let mut f = vec![0.0; k + 1];
    let mut ins = vec![0; k + 1];
    let mut sem = vec![0; k + 1];
    for row in doc.class {
        let i = row.id as usize;
        if i > k {
            return Err(Error::State(format!("fixture row id {} outside 0..={k}", row.id)));
        }
        f[i] = row.f;
        ins[i] = row.instances;
        sem[i] = row.frames;
    }
    finalize_from_proportions(&f, &ins, &sem, doc.eps.unwrap_or(DEFAULT_EPS), cfg, 0)
}
