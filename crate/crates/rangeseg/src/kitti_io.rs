//! Binary scan/label ingestion and emission in the de-facto SemanticKITTI
//! layout, plus the class configuration document.
//!
//! Scan files are `N x 16` bytes: four little-endian `f32` per point
//! `(x, y, z, rem)`. Label files are `N x 4` bytes: one little-endian `u32`
//! per point, low 16 bits the raw semantic id, high 16 bits the instance id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// One LiDAR return: Cartesian coordinates in meters plus remission.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub rem: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, rem: f32) -> Self {
        Point { x, y, z, rem }
    }

    /// Euclidean range from the sensor origin, computed in f64.
    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }
}

/// One labeled LiDAR scan. `semantic` holds train ids (ignore id for
/// unlabeled points), `instance` holds per-point instance ids (0 = none).
/// All three arrays always have identical length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub semantic: Vec<u16>,
    pub instance: Vec<u32>,
}

impl PointCloud {
    /// Cloud with unset labels (all ignore/0).
    pub fn from_points(points: Vec<Point>) -> Self {
        let n = points.len();
        PointCloud {
            points,
            semantic: vec![0; n],
            instance: vec![0; n],
        }
    }

    pub fn with_labels(points: Vec<Point>, semantic: Vec<u16>, instance: Vec<u32>) -> Result<Self> {
        let mut cloud = PointCloud::from_points(points);
        cloud.attach_labels(semantic, instance)?;
        Ok(cloud)
    }

    /// Attach label arrays read from a paired label file.
    pub fn attach_labels(&mut self, semantic: Vec<u16>, instance: Vec<u32>) -> Result<()> {
        if semantic.len() != self.points.len() || instance.len() != self.points.len() {
            return Err(Error::LengthMismatch {
                left: self.points.len(),
                right: semantic.len(),
            });
        }
        self.semantic = semantic;
        self.instance = instance;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-point semantic label and instance id; the unit of evaluation and of
/// benchmark-format serialization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PanopticResult {
    pub semantic: Vec<u16>,
    pub instance: Vec<u32>,
}

impl PanopticResult {
    pub fn new(semantic: Vec<u16>, instance: Vec<u32>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::LengthMismatch {
                left: semantic.len(),
                right: instance.len(),
            });
        }
        Ok(PanopticResult { semantic, instance })
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

/// Dataset class configuration: the raw-id remap, display names, thing/stuff
/// flags and the ignored train id. Loaded from a TOML document so other
/// datasets can be plugged in without recompiling.
#[derive(Debug, Clone)]
pub struct ClassConfig {
    num_classes: usize,
    ignore_id: u16,
    raw_to_train: HashMap<u16, u16>,
    train_to_raw: HashMap<u16, u16>,
    names: Vec<String>,
    is_thing: Vec<bool>,
}

impl ClassConfig {
    /// Number of trained (non-ignore) classes K.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_id(&self) -> u16 {
        self.ignore_id
    }

    /// Map a raw dataset id to its train id; unknown raw ids map to the
    /// ignore id, matching dataset practice for unlabeled points.
    pub fn remap_raw(&self, raw: u16) -> u16 {
        *self.raw_to_train.get(&raw).unwrap_or(&self.ignore_id)
    }

    /// Canonical raw id for a train id (the first raw id listed for it).
    pub fn raw_for_train(&self, train: u16) -> Result<u16> {
        self.train_to_raw.get(&train).copied().ok_or_else(|| {
            Error::ConfigValidation(format!("train id {train} has no raw mapping"))
        })
    }

    pub fn is_thing(&self, train: u16) -> bool {
        self.is_thing.get(train as usize).copied().unwrap_or(false)
    }

    pub fn name(&self, train: u16) -> &str {
        self.names
            .get(train as usize)
            .map(String::as_str)
            .unwrap_or("unknown")
    }

    /// Train ids of real classes (ignore id excluded), ascending.
    pub fn class_ids(&self) -> impl Iterator<Item = u16> + '_ {
        let ignore = self.ignore_id;
        (0..=self.num_classes as u16).filter(move |id| *id != ignore)
    }

    /// Class channel index (0..K) for a real train id, as used by the
    /// network heads which exclude the ignore class.
    pub fn channel_of(&self, train: u16) -> Option<usize> {
        if train == self.ignore_id || train as usize > self.num_classes {
            return None;
        }
        let mut channel = train as usize;
        if self.ignore_id < train {
            channel -= 1;
        }
        Some(channel)
    }

    /// Inverse of [`ClassConfig::channel_of`].
    pub fn train_of_channel(&self, channel: usize) -> u16 {
        let mut id = channel as u16;
        if id >= self.ignore_id {
            id += 1;
        }
        id
    }

    /// Per-channel thing flags in channel order (length K).
    pub fn thing_channels(&self) -> Vec<bool> {
        self.class_ids().map(|id| self.is_thing(id)).collect()
    }
}

#[derive(Debug, Deserialize)]
struct RawConfigDoc {
    num_classes: Option<usize>,
    ignore_id: Option<u16>,
    #[serde(default)]
    classes: Vec<RawClassEntry>,
}

#[derive(Debug, Deserialize)]
struct RawClassEntry {
    id: Option<u16>,
    name: Option<String>,
    thing: Option<bool>,
    #[serde(default)]
    raw: Vec<u16>,
}

/// Parse and validate a class configuration document.
pub fn parse_class_config(text: &str) -> Result<ClassConfig> {
    let doc: RawConfigDoc =
        toml::from_str(text).map_err(|e| Error::ConfigValidation(e.to_string()))?;
    let num_classes = doc
        .num_classes
        .ok_or_else(|| Error::ConfigValidation("missing num_classes".into()))?;
    if num_classes == 0 {
        return Err(Error::ConfigValidation("num_classes must be >= 1".into()));
    }
    let ignore_id = doc.ignore_id.unwrap_or(0);
    if ignore_id as usize > num_classes {
        return Err(Error::ConfigValidation(format!(
            "ignore_id {ignore_id} outside train id range 0..={num_classes}"
        )));
    }

    let mut names = vec![String::new(); num_classes + 1];
    let mut is_thing = vec![false; num_classes + 1];
    let mut seen = vec![false; num_classes + 1];
    let mut raw_to_train = HashMap::new();
    let mut train_to_raw = HashMap::new();
    names[ignore_id as usize] = "unlabeled".to_string();

    for entry in &doc.classes {
        let id = entry
            .id
            .ok_or_else(|| Error::ConfigValidation("class entry missing id".into()))?;
        if id as usize > num_classes {
            return Err(Error::ConfigValidation(format!(
                "class id {id} outside train id range 0..={num_classes}"
            )));
        }
        if seen[id as usize] {
            return Err(Error::ConfigValidation(format!("duplicate train id {id}")));
        }
        seen[id as usize] = true;

        if id != ignore_id {
            is_thing[id as usize] = entry.thing.ok_or_else(|| {
                Error::ConfigValidation(format!("class {id} missing thing flag"))
            })?;
        }
        names[id as usize] = entry
            .name
            .clone()
            .ok_or_else(|| Error::ConfigValidation(format!("class {id} missing name")))?;

        if entry.raw.is_empty() {
            return Err(Error::ConfigValidation(format!(
                "class {id} has no raw ids (missing inverse entry)"
            )));
        }
        for (k, &raw) in entry.raw.iter().enumerate() {
            if let Some(prev) = raw_to_train.insert(raw, id) {
                return Err(Error::ConfigValidation(format!(
                    "raw id {raw} mapped to both {prev} and {id}"
                )));
            }
            // First raw id listed is the canonical inverse.
            if k == 0 {
                train_to_raw.insert(id, raw);
            }
        }
    }

    for id in 0..=num_classes as u16 {
        if id != ignore_id && !seen[id as usize] {
            return Err(Error::ConfigValidation(format!(
                "train id {id} not defined in config"
            )));
        }
    }
    if !seen[ignore_id as usize] {
        // Implicit ignore entry: the unlabeled raw id 0 maps to it unless taken.
        raw_to_train.entry(0).or_insert(ignore_id);
        train_to_raw.insert(ignore_id, 0);
    }

    let cfg = ClassConfig {
        num_classes,
        ignore_id,
        raw_to_train,
        train_to_raw,
        names,
        is_thing,
    };
    // raw_to_train(train_to_raw(t)) must be the identity on train ids.
    for id in 0..=num_classes as u16 {
        let raw = cfg.raw_for_train(id)?;
        if cfg.remap_raw(raw) != id {
            return Err(Error::ConfigValidation(format!(
                "inverse map broken for train id {id}: raw {raw} remaps to {}",
                cfg.remap_raw(raw)
            )));
        }
    }
    Ok(cfg)
}

pub fn load_class_config(path: impl AsRef<Path>) -> Result<ClassConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_class_config(&text)
}

/// Read a binary scan file. Labels are left unset (all ignore).
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedScan {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
        });
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let at = |k: usize| {
            let o = i * 16 + k * 4;
            f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
        };
        let p = Point::new(at(0), at(1), at(2), at(3));
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.rem.is_finite()) {
            return Err(Error::CorruptScan {
                path: path.to_path_buf(),
                index: i,
            });
        }
        points.push(p);
    }
    Ok(PointCloud::from_points(points))
}

/// Write a scan file; exact inverse of [`read_point_cloud`].
pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        bytes.extend_from_slice(&p.x.to_le_bytes());
        bytes.extend_from_slice(&p.y.to_le_bytes());
        bytes.extend_from_slice(&p.z.to_le_bytes());
        bytes.extend_from_slice(&p.rem.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a label file, remapping raw semantic ids to train ids.
pub fn read_labels(path: impl AsRef<Path>, cfg: &ClassConfig) -> Result<(Vec<u16>, Vec<u32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedLabels {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
        });
    }
    let n = bytes.len() / 4;
    let mut semantic = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    for i in 0..n {
        let o = i * 4;
        let word = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        semantic.push(cfg.remap_raw((word & 0xFFFF) as u16));
        instance.push(word >> 16);
    }
    Ok((semantic, instance))
}

/// Write a label file in benchmark submission format:
/// `word = (instance << 16) | raw_semantic`.
pub fn write_labels(path: impl AsRef<Path>, result: &PanopticResult, cfg: &ClassConfig) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(result.len() * 4);
    for (sem, inst) in result.semantic.iter().zip(&result.instance) {
        let raw = cfg.raw_for_train(*sem)? as u32;
        if *inst > 0xFFFF {
            return Err(Error::State(format!(
                "instance id {inst} exceeds the 16-bit label field"
            )));
        }
        let word = (inst << 16) | raw;
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
