//! Transformer decoder forward pass: pre-norm self-attention,
//! cross-attention over the flattened backbone features, and a ReLU FFN,
//! followed by shared linear class and mask-embedding heads.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

use super::attention::{multi_head_attention, AttentionParams, LinearParams};
use super::tensors::NamedTensors;
use super::{DecoderConfig, LayerPrediction, QueryOutputs};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn layer_norm(x: &Array2<f64>, p: &LayerNormParams) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * p.gamma[i] + p.beta[i];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub linear1: LinearParams,
    pub linear2: LinearParams,
}

impl FfnParams {
    fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut hidden = self.linear1.apply(x)?;
        hidden.mapv_inplace(|v| v.max(0.0));
        self.linear2.apply(hidden.view())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub norm1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm3: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Projects raw backbone features to the decoder width.
    pub input_proj: LinearParams,
    pub layers: Vec<DecoderLayerParams>,
    pub final_norm: LayerNormParams,
    /// Shared class head `(K + 1, C)`; last row is the no-object class.
    pub class_head: LinearParams,
    /// Shared mask-embedding head `(C', C)`.
    pub mask_head: LinearParams,
    /// Learned query embeddings `(Q, C)` used by the pipeline.
    pub query_embed: Array2<f64>,
}

impl DecoderParams {
    /// Load from a named-tensor container. Expected names (`{i}` is the
    /// layer index):
    ///
    /// - `decoder.query_embed`, `decoder.input_proj.{weight,bias}`
    /// - `decoder.layers.{i}.norm{1,2,3}.{weight,bias}`
    /// - `decoder.layers.{i}.{self_attn,cross_attn}.{q,k,v,out}.{weight,bias}`
    /// - `decoder.layers.{i}.ffn.linear{1,2}.{weight,bias}`
    /// - `decoder.norm.{weight,bias}`, `decoder.class_head.{weight,bias}`,
    ///   `decoder.mask_head.{weight,bias}`
    ///
    /// The names `decoder.query_pos` and `decoder.memory_pos` are reserved
    /// for positional encodings; entries under them are tolerated and
    /// currently unused.
    pub fn from_tensors(
        tensors: &NamedTensors,
        cfg: &DecoderConfig,
        num_classes: usize,
        feature_channels: usize,
        pixel_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let linear = |name: &str, rows: usize, cols: usize| -> Result<LinearParams> {
            LinearParams::new(
                tensors.require_2d(&format!("{name}.weight"), rows, cols)?,
                tensors.require_1d(&format!("{name}.bias"), rows)?,
            )
        };
        let norm = |name: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: tensors.require_1d(&format!("{name}.weight"), c)?,
                beta: tensors.require_1d(&format!("{name}.bias"), c)?,
            })
        };
        let attention = |name: &str| -> Result<AttentionParams> {
            Ok(AttentionParams {
                query: linear(&format!("{name}.q"), c, c)?,
                key: linear(&format!("{name}.k"), c, c)?,
                value: linear(&format!("{name}.v"), c, c)?,
                output: linear(&format!("{name}.out"), c, c)?,
                num_heads: cfg.num_heads,
            })
        };

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let base = format!("decoder.layers.{i}");
            layers.push(DecoderLayerParams {
                norm1: norm(&format!("{base}.norm1"))?,
                self_attn: attention(&format!("{base}.self_attn"))?,
                norm2: norm(&format!("{base}.norm2"))?,
                cross_attn: attention(&format!("{base}.cross_attn"))?,
                norm3: norm(&format!("{base}.norm3"))?,
                ffn: FfnParams {
                    linear1: linear(&format!("{base}.ffn.linear1"), cfg.ffn_dim, c)?,
                    linear2: linear(&format!("{base}.ffn.linear2"), c, cfg.ffn_dim)?,
                },
            });
        }

        Ok(DecoderParams {
            input_proj: linear("decoder.input_proj", c, feature_channels)?,
            layers,
            final_norm: norm("decoder.norm")?,
            class_head: linear("decoder.class_head", num_classes + 1, c)?,
            mask_head: linear("decoder.mask_head", pixel_channels, c)?,
            query_embed: tensors.require_2d("decoder.query_embed", cfg.num_queries, c)?,
        })
    }
}

fn head_outputs(x: &Array2<f64>, params: &DecoderParams) -> Result<LayerPrediction> {
    let normed = layer_norm(x, &params.final_norm);
    Ok(LayerPrediction {
        class_logits: params.class_head.apply(normed.view())?,
        mask_embeddings: params.mask_head.apply(normed.view())?,
    })
}

/// Run the decoder stack over `query_embeds` against flattened backbone
/// features. When `collect_per_layer` is set, the shared heads are applied
/// to every layer's output (one auxiliary prediction per layer).
pub fn decoder_forward(
    query_embeds: ArrayView2<f64>,
    memory: ArrayView2<f64>,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    collect_per_layer: bool,
) -> Result<QueryOutputs> {
    if query_embeds.dim().1 != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "query width {} vs embed dim {}",
            query_embeds.dim().1,
            cfg.embed_dim
        )));
    }
    if params.layers.len() != cfg.num_layers {
        return Err(Error::Shape(format!(
            "{} layer parameter blocks for {} layers",
            params.layers.len(),
            cfg.num_layers
        )));
    }
    let memory = params.input_proj.apply(memory)?;
    let mut x = query_embeds.to_owned();
    let mut per_layer = collect_per_layer.then(Vec::new);

    for layer in &params.layers {
        let normed = layer_norm(&x, &layer.norm1);
        x = x + multi_head_attention(normed.view(), normed.view(), normed.view(), &layer.self_attn)?;
        let normed = layer_norm(&x, &layer.norm2);
        x = x + multi_head_attention(normed.view(), memory.view(), memory.view(), &layer.cross_attn)?;
        let normed = layer_norm(&x, &layer.norm3);
        x = x + layer.ffn.apply(normed.view())?;
        if let Some(acc) = per_layer.as_mut() {
            acc.push(head_outputs(&x, params)?);
        }
    }

    let last = head_outputs(&x, params)?;
    Ok(QueryOutputs {
        class_logits: last.class_logits,
        mask_embeddings: last.mask_embeddings,
        per_layer,
    })
}
