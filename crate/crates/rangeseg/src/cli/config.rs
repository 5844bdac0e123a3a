//! Pipeline configuration document. Commands read one TOML file; flags
//! override individual values, and `RANGESEG_DATA_ROOT` overrides the
//! dataset root.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentParams, DropGranularity, PasteDropMode};
use crate::error::{Error, Result};
use crate::head::{AuxSupervision, DecoderConfig, HeadConfig, PanopticThresholds, UpsampleMode};
use crate::loss::{BalanceStrategy, LossWeights};
use crate::postprocess::KnnParams;
use crate::projection::SensorGeometry;
use crate::stats::Task;

pub const DATA_ROOT_ENV: &str = "RANGESEG_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub train_sequences: Vec<String>,
    pub eval_sequences: Vec<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: PathBuf::from("."),
            train_sequences: vec![
                "00".into(),
                "01".into(),
                "02".into(),
                "03".into(),
                "04".into(),
                "05".into(),
                "06".into(),
                "07".into(),
                "09".into(),
                "10".into(),
            ],
            eval_sequences: vec!["08".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySection {
    pub width: usize,
    pub height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            width: 2048,
            height: 64,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
        }
    }
}

impl GeometrySection {
    pub fn build(&self) -> Result<SensorGeometry> {
        SensorGeometry::from_degrees(self.width, self.height, self.fov_up_deg, self.fov_down_deg)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub p_flip: f64,
    pub rot_range_deg: f64,
    pub trans_range: f64,
    pub p_point_drop: f64,
    pub threshold: f64,
    pub task: Task,
    pub mode: PasteDropMode,
    pub drop_granularity: DropGranularity,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            p_flip: 0.5,
            rot_range_deg: 180.0,
            trans_range: 0.5,
            p_point_drop: 0.05,
            threshold: 0.1,
            task: Task::Semantic,
            mode: PasteDropMode::PasteDrop,
            drop_granularity: DropGranularity::WholeClass,
        }
    }
}

impl AugmentSection {
    pub fn build(&self, seed: u64) -> Result<AugmentParams> {
        let params = AugmentParams {
            p_flip: self.p_flip,
            rot_range: self.rot_range_deg.to_radians(),
            trans_range: self.trans_range,
            p_point_drop: self.p_point_drop,
            threshold: self.threshold,
            task: self.task,
            seed,
            drop_granularity: self.drop_granularity,
            mode: self.mode,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub lambda_cls: f64,
    pub lambda_focal: f64,
    pub lambda_lovasz: f64,
    pub lambda_boundary: f64,
    pub gamma: f64,
    pub strategy: BalanceStrategy,
    pub no_object_weight: f64,
    pub boundary_theta: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_cls: 1.0,
            lambda_focal: 1.0,
            lambda_lovasz: 1.0,
            lambda_boundary: 1.0,
            gamma: 2.0,
            strategy: BalanceStrategy::Unified,
            no_object_weight: 0.1,
            boundary_theta: 3,
        }
    }
}

impl LossSection {
    pub fn build(&self, num_channels: usize) -> Result<LossWeights> {
        let mut weights = LossWeights::uniform(num_channels);
        weights.lambda_cls = self.lambda_cls;
        weights.lambda_focal = self.lambda_focal;
        weights.lambda_lovasz = self.lambda_lovasz;
        weights.lambda_boundary = self.lambda_boundary;
        weights.gamma = self.gamma;
        weights.strategy = self.strategy;
        weights.no_object_weight = self.no_object_weight;
        weights.boundary_theta = self.boundary_theta;
        weights.validate()?;
        Ok(weights)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSection {
    pub num_layers: usize,
    pub num_queries: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub feature_channels: usize,
    pub embed_channels: usize,
    pub pixel_channels: usize,
    pub upsample: UpsampleMode,
    pub aux: AuxSupervision,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            num_layers: 4,
            num_queries: 100,
            embed_dim: 128,
            num_heads: 8,
            ffn_dim: 256,
            feature_channels: 128,
            embed_channels: 256,
            pixel_channels: 128,
            upsample: UpsampleMode::Interpolation,
            aux: AuxSupervision::PixelTaps,
        }
    }
}

impl HeadSection {
    pub fn build(&self, num_classes: usize) -> Result<HeadConfig> {
        let cfg = HeadConfig {
            decoder: DecoderConfig {
                num_layers: self.num_layers,
                num_queries: self.num_queries,
                embed_dim: self.embed_dim,
                num_heads: self.num_heads,
                ffn_dim: self.ffn_dim,
            },
            feature_channels: self.feature_channels,
            embed_channels: self.embed_channels,
            pixel_channels: self.pixel_channels,
            num_classes,
            upsample: self.upsample,
        };
        cfg.decoder.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TemporalSection {
    pub k_prev: usize,
    pub l_next: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSection {
    pub tau_obj: f64,
    pub tau_ovl: f64,
    pub task: Task,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            tau_obj: 0.8,
            tau_ovl: 0.8,
            task: Task::Semantic,
        }
    }
}

impl InferenceSection {
    pub fn thresholds(&self) -> PanopticThresholds {
        PanopticThresholds {
            object_score: self.tau_obj,
            overlap: self.tau_ovl,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stats_path: PathBuf,
    pub class_config: PathBuf,
    pub dataset: DatasetSection,
    pub geometry: GeometrySection,
    pub augment: AugmentSection,
    pub loss: LossSection,
    pub head: HeadSection,
    pub knn: KnnParams,
    pub temporal: TemporalSection,
    pub inference: InferenceSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            stats_path: PathBuf::from("stats.toml"),
            class_config: PathBuf::from("data/semantic-kitti.toml"),
            dataset: DatasetSection::default(),
            geometry: GeometrySection::default(),
            augment: AugmentSection::default(),
            loss: LossSection::default(),
            head: HeadSection::default(),
            knn: KnnParams::default(),
            temporal: TemporalSection::default(),
            inference: InferenceSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::ConfigValidation(e.to_string()))?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let mut cfg = PipelineConfig::default();
                cfg.apply_env();
                Ok(cfg)
            }
        }
    }

    fn apply_env(&mut self) {
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                self.dataset.root = PathBuf::from(root);
            }
        }
    }

    pub fn sequence_dir(&self, sequence: &str) -> PathBuf {
        self.dataset.root.join("sequences").join(sequence)
    }
}

pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::ConfigValidation(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}
