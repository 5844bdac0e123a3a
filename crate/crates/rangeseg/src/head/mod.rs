//! Forward math of the mask-classification head at desk scale: transformer
//! decoder, pixel decoder with interpolation or data-dependent upsampling,
//! dot-product mask prediction, deep-supervision taps and the semantic /
//! panoptic inference merging. Weights come from external fixtures (random
//! or frozen); there is no training path.

mod attention;
mod decoder;
mod inference;
mod pixel_decoder;
pub mod tensors;

pub use attention::{
    multi_head_attention, multi_head_attention_with_weights, AttentionParams, LinearParams,
};
pub use decoder::{decoder_forward, DecoderLayerParams, DecoderParams, FfnParams, LayerNormParams};
pub use inference::{
    panoptic_inference, semantic_inference, semantic_scores, PanopticMap, PanopticThresholds,
    VOID_CLASS,
};
pub use pixel_decoder::{
    aux_semantic_logits, bilinear_upsample, block_rearrange_inverse, decode_pyramid, dupsample,
    predict_masks, FeaturePyramid, PixelDecoderParams,
};
pub use tensors::NamedTensors;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How the coarse pyramid levels reach full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    #[default]
    Interpolation,
    DataDependent,
}

/// Which auxiliary supervision taps to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxSupervision {
    /// One auxiliary prediction per transformer decoder layer.
    DecoderLayers,
    /// One auxiliary logit map per upsampled pixel-decoder tap.
    #[default]
    PixelTaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_queries: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 4,
            num_queries: 100,
            embed_dim: 128,
            num_heads: 8,
            ffn_dim: 256,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_queries == 0 {
            return Err(Error::ConfigValidation(
                "decoder needs at least one layer and one query".into(),
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::ConfigValidation(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Shapes of the whole head: decoder, pixel decoder and the feature space
/// they meet in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub decoder: DecoderConfig,
    /// Channel count of the backbone pyramid levels.
    pub feature_channels: usize,
    /// Intermediate channel count of the pixel decoder.
    pub embed_channels: usize,
    /// Final pixel embedding channels, equal to the mask embedding width.
    pub pixel_channels: usize,
    pub num_classes: usize,
    pub upsample: UpsampleMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            decoder: DecoderConfig::default(),
            feature_channels: 128,
            embed_channels: 256,
            pixel_channels: 128,
            num_classes: 19,
            upsample: UpsampleMode::Interpolation,
        }
    }
}

/// Class logits and mask embeddings produced by one decoder tap.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    pub class_logits: Array2<f64>,
    pub mask_embeddings: Array2<f64>,
}

/// Decoder outputs: `(Q, K + 1)` class logits (last column no-object) and
/// `(Q, C')` mask embeddings, optionally one prediction per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutputs {
    pub class_logits: Array2<f64>,
    pub mask_embeddings: Array2<f64>,
    pub per_layer: Option<Vec<LayerPrediction>>,
}

/// Full-resolution pixel embeddings plus the three upsampled taps.
#[derive(Debug, Clone)]
pub struct PixelEmbeddings {
    pub embeddings: Array3<f64>,
    pub taps: Vec<Array3<f64>>,
}

/// All head parameters loaded from one fixture container.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub decoder: DecoderParams,
    pub pixel_decoder: PixelDecoderParams,
    /// One linear head per pixel-decoder tap.
    pub aux_heads: Vec<LinearParams>,
    /// Stand-in input projection mapping the 5 range-image channels into
    /// the backbone feature space (the trained backbone is out of scope).
    pub stem: LinearParams,
}

impl HeadParams {
    pub fn from_tensors(tensors: &NamedTensors, cfg: &HeadConfig) -> Result<Self> {
        let decoder = DecoderParams::from_tensors(
            tensors,
            &cfg.decoder,
            cfg.num_classes,
            cfg.feature_channels,
            cfg.pixel_channels,
        )?;
        let pixel_decoder = PixelDecoderParams::from_tensors(
            tensors,
            cfg.feature_channels,
            cfg.embed_channels,
            cfg.pixel_channels,
            cfg.upsample,
        )?;
        let mut aux_heads = Vec::with_capacity(3);
        for i in 0..3 {
            aux_heads.push(LinearParams::new(
                tensors.require_2d(
                    &format!("aux_head.{i}.weight"),
                    cfg.num_classes,
                    cfg.feature_channels,
                )?,
                tensors.require_1d(&format!("aux_head.{i}.bias"), cfg.num_classes)?,
            )?);
        }
        let stem = LinearParams::new(
            tensors.require_2d("stem.weight", cfg.feature_channels, 5)?,
            tensors.require_1d("stem.bias", cfg.feature_channels)?,
        )?;
        Ok(HeadParams {
            decoder,
            pixel_decoder,
            aux_heads,
            stem,
        })
    }
}

/// Auxiliary semantic score maps for per-layer supervision: every decoder
/// tap is routed through mask prediction and the semantic merge.
pub fn decoder_layer_aux_scores(
    outputs: &QueryOutputs,
    pixel: &PixelEmbeddings,
) -> Result<Vec<Array3<f64>>> {
    let per_layer = outputs
        .per_layer
        .as_ref()
        .ok_or_else(|| Error::State("decoder outputs carry no per-layer predictions".into()))?;
    per_layer
        .iter()
        .map(|layer| {
            let masks = predict_masks(layer.mask_embeddings.view(), pixel.embeddings.view())?;
            semantic_scores(layer.class_logits.view(), masks.view())
        })
        .collect()
}

/// Auxiliary class-logit maps for pixel-tap supervision: one linear head
/// per upsampled tap.
pub fn pixel_tap_aux_logits(
    pixel: &PixelEmbeddings,
    heads: &[LinearParams],
) -> Result<Vec<Array3<f64>>> {
    if heads.len() != pixel.taps.len() {
        return Err(Error::Shape(format!(
            "{} aux heads for {} taps",
            heads.len(),
            pixel.taps.len()
        )));
    }
    pixel
        .taps
        .iter()
        .zip(heads)
        .map(|(tap, head)| aux_semantic_logits(tap.view(), head))
        .collect()
}

/// Deterministic random fixture covering every tensor the head loads.
pub fn random_fixture(cfg: &HeadConfig, seed: u64) -> NamedTensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = NamedTensors::new();
    let mut matrix = |t: &mut NamedTensors, name: &str, rows: usize, cols: usize| {
        let scale = 1.0 / (cols as f32).sqrt();
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        t.insert(name, vec![rows, cols], data).expect("valid shape");
    };
    // Biases and norm parameters need their own generator scope, so reuse
    // the same closure pattern with explicit draws.
    let c = cfg.decoder.embed_dim;
    let f = cfg.decoder.num_heads; // silence unused warnings on tiny configs
    let _ = f;

    matrix(&mut tensors, "decoder.query_embed", cfg.decoder.num_queries, c);
    matrix(&mut tensors, "decoder.input_proj.weight", c, cfg.feature_channels);

    for i in 0..cfg.decoder.num_layers {
        let base = format!("decoder.layers.{i}");
        for attn in ["self_attn", "cross_attn"] {
            for proj in ["q", "k", "v", "out"] {
                matrix(&mut tensors, &format!("{base}.{attn}.{proj}.weight"), c, c);
            }
        }
        matrix(&mut tensors, &format!("{base}.ffn.linear1.weight"), cfg.decoder.ffn_dim, c);
        matrix(&mut tensors, &format!("{base}.ffn.linear2.weight"), c, cfg.decoder.ffn_dim);
    }
    matrix(&mut tensors, "decoder.class_head.weight", cfg.num_classes + 1, c);
    matrix(&mut tensors, "decoder.mask_head.weight", cfg.pixel_channels, c);
    matrix(
        &mut tensors,
        "pixel_decoder.embed.weight",
        cfg.embed_channels,
        5 * cfg.feature_channels,
    );
    matrix(&mut tensors, "pixel_decoder.out.weight", cfg.pixel_channels, cfg.embed_channels);
    if cfg.upsample == UpsampleMode::DataDependent {
        for (name, s) in [("up2", 2usize), ("up3", 4), ("up4", 8)] {
            matrix(
                &mut tensors,
                &format!("pixel_decoder.{name}.weight"),
                cfg.feature_channels * s * s,
                cfg.feature_channels,
            );
        }
    }
    for i in 0..3 {
        matrix(
            &mut tensors,
            &format!("aux_head.{i}.weight"),
            cfg.num_classes,
            cfg.feature_channels,
        );
    }
    matrix(&mut tensors, "stem.weight", cfg.feature_channels, 5);

    // Bias and norm vectors, drawn after the matrices.
    let mut vector = |t: &mut NamedTensors, name: &str, len: usize, center: f32, spread: f32| {
        let data: Vec<f32> = (0..len)
            .map(|_| center + rng.gen_range(-spread..spread))
            .collect();
        t.insert(name, vec![len], data).expect("valid shape");
    };
    vector(&mut tensors, "decoder.input_proj.bias", c, 0.0, 0.02);
    for i in 0..cfg.decoder.num_layers {
        let base = format!("decoder.layers.{i}");
        for norm in ["norm1", "norm2", "norm3"] {
            vector(&mut tensors, &format!("{base}.{norm}.weight"), c, 1.0, 0.05);
            vector(&mut tensors, &format!("{base}.{norm}.bias"), c, 0.0, 0.05);
        }
        for attn in ["self_attn", "cross_attn"] {
            for proj in ["q", "k", "v", "out"] {
                vector(&mut tensors, &format!("{base}.{attn}.{proj}.bias"), c, 0.0, 0.02);
            }
        }
        vector(&mut tensors, &format!("{base}.ffn.linear1.bias"), cfg.decoder.ffn_dim, 0.0, 0.02);
        vector(&mut tensors, &format!("{base}.ffn.linear2.bias"), c, 0.0, 0.02);
    }
    vector(&mut tensors, "decoder.norm.weight", c, 1.0, 0.05);
    vector(&mut tensors, "decoder.norm.bias", c, 0.0, 0.05);
    vector(&mut tensors, "decoder.class_head.bias", cfg.num_classes + 1, 0.0, 0.02);
    vector(&mut tensors, "decoder.mask_head.bias", cfg.pixel_channels, 0.0, 0.02);
    vector(&mut tensors, "pixel_decoder.embed.bias", cfg.embed_channels, 0.0, 0.02);
    vector(&mut tensors, "pixel_decoder.out.bias", cfg.pixel_channels, 0.0, 0.02);
    for i in 0..3 {
        vector(&mut tensors, &format!("aux_head.{i}.bias"), cfg.num_classes, 0.0, 0.02);
    }
    vector(&mut tensors, "stem.bias", cfg.feature_channels, 0.0, 0.02);
    tensors
}
