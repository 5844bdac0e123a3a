//! Interpolation-style pixel decoder: upsample the coarse pyramid levels to
//! full resolution, concatenate all five levels and mix channels with two
//! 1x1 convolutions down to the pixel embeddings.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

use super::attention::LinearParams;
use super::tensors::NamedTensors;
use super::{PixelEmbeddings, UpsampleMode};

/// Backbone feature maps at scales 1, 1, 1/2, 1/4, 1/8, all with the same
/// channel count.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub x0: Array3<f64>,
    pub x1: Array3<f64>,
    pub x2: Array3<f64>,
    pub x3: Array3<f64>,
    pub x4: Array3<f64>,
}

impl FeaturePyramid {
    /// Validate the 1,1,2,4,8 scale ladder; returns `(channels, h, w)` at
    /// full resolution.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.x0.dim();
        let expect = [
            ("x1", &self.x1, 1usize),
            ("x2", &self.x2, 2),
            ("x3", &self.x3, 4),
            ("x4", &self.x4, 8),
        ];
        for (name, t, div) in expect {
            if h % div != 0 || w % div != 0 || t.dim() != (c, h / div, w / div) {
                return Err(Error::Shape(format!(
                    "pyramid level {name}: expected ({c}, {}, {}), got {:?}",
                    h / div.max(1),
                    w / div.max(1),
                    t.dim()
                )));
            }
        }
        Ok((c, h, w))
    }
}

/// Align-corners-false bilinear interpolation by an integer factor.
pub fn bilinear_upsample(feature: ArrayView3<f64>, scale: usize) -> Array3<f64> {
    let (c, h, w) = feature.dim();
    if scale == 1 {
        return feature.to_owned();
    }
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let coords = |o: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = coords(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = coords(ox, w);
                let top = feature[(ch, y0, x0)] * (1.0 - fx) + feature[(ch, y0, x1)] * fx;
                let bottom = feature[(ch, y1, x0)] * (1.0 - fx) + feature[(ch, y1, x1)] * fx;
                out[(ch, oy, ox)] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Data-dependent upsampling: per spatial location, a linear map
/// `C -> C_out * s^2` whose output vector is rearranged into an `s x s`
/// block of `C_out` channels. Index `c_out * s^2 + dy * s + dx` of the
/// projected vector lands at channel `c_out`, offset `(dy, dx)`.
pub fn dupsample(feature: ArrayView3<f64>, weight: ArrayView2<f64>, scale: usize) -> Result<Array3<f64>> {
    let (c, h, w) = feature.dim();
    let (rows, cols) = weight.dim();
    if cols != c || rows % (scale * scale) != 0 {
        return Err(Error::Shape(format!(
            "dupsample weight ({rows}, {cols}) incompatible with {c} channels at scale {scale}"
        )));
    }
    let c_out = rows / (scale * scale);
    let mut out = Array3::<f64>::zeros((c_out, h * scale, w * scale));
    for y in 0..h {
        for x in 0..w {
            for row in 0..rows {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += weight[(row, ch)] * feature[(ch, y, x)];
                }
                let co = row / (scale * scale);
                let rem = row % (scale * scale);
                let (dy, dx) = (rem / scale, rem % scale);
                out[(co, y * scale + dy, x * scale + dx)] = acc;
            }
        }
    }
    Ok(out)
}

/// Inverse of the spatial rearrangement done by [`dupsample`]: gathers each
/// `s x s` block back into the projected vector layout `(C_out * s^2, h, w)`.
pub fn block_rearrange_inverse(upsampled: ArrayView3<f64>, scale: usize) -> Array3<f64> {
    let (c_out, oh, ow) = upsampled.dim();
    let (h, w) = (oh / scale, ow / scale);
    let mut out = Array3::<f64>::zeros((c_out * scale * scale, h, w));
    for co in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..scale {
                    for dx in 0..scale {
                        let row = co * scale * scale + dy * scale + dx;
                        out[(row, y, x)] = upsampled[(co, y * scale + dy, x * scale + dx)];
                    }
                }
            }
        }
    }
    out
}

/// 1x1 convolution: per-pixel linear map over channels.
fn conv1x1(input: ArrayView3<f64>, params: &LinearParams) -> Result<Array3<f64>> {
    let (c, h, w) = input.dim();
    let flat = input
        .to_shape((c, h * w))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned();
    let mut mixed = params.weight.dot(&flat);
    for r in 0..mixed.dim().0 {
        let b = params.bias[r];
        mixed.row_mut(r).mapv_inplace(|v| v + b);
    }
    let out_c = params.weight.dim().0;
    Ok(mixed
        .to_shape((out_c, h, w))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDecoderParams {
    /// First 1x1 convolution: 5C concatenation -> embed channels.
    pub embed: LinearParams,
    /// Second 1x1 convolution: embed channels -> pixel channels.
    pub out: LinearParams,
    /// Learned projection per upsampled level (scales 2, 4, 8), used in
    /// data-dependent mode.
    pub up_weights: Option<[Array2<f64>; 3]>,
    /// LeakyReLU slope applied after the first convolution; `None` disables
    /// the nonlinearity (linear test mode).
    pub leaky_slope: Option<f64>,
}

impl PixelDecoderParams {
    /// Expected names: `pixel_decoder.embed.{weight,bias}`,
    /// `pixel_decoder.out.{weight,bias}` and, in data-dependent mode,
    /// `pixel_decoder.up{2,3,4}.weight`.
    pub fn from_tensors(
        tensors: &NamedTensors,
        feature_channels: usize,
        embed_channels: usize,
        pixel_channels: usize,
        mode: UpsampleMode,
    ) -> Result<Self> {
        let embed = LinearParams::new(
            tensors.require_2d("pixel_decoder.embed.weight", embed_channels, 5 * feature_channels)?,
            tensors.require_1d("pixel_decoder.embed.bias", embed_channels)?,
        )?;
        let out = LinearParams::new(
            tensors.require_2d("pixel_decoder.out.weight", pixel_channels, embed_channels)?,
            tensors.require_1d("pixel_decoder.out.bias", pixel_channels)?,
        )?;
        let up_weights = match mode {
            UpsampleMode::Interpolation => None,
            UpsampleMode::DataDependent => Some([
                tensors.require_2d("pixel_decoder.up2.weight", feature_channels * 4, feature_channels)?,
                tensors.require_2d("pixel_decoder.up3.weight", feature_channels * 16, feature_channels)?,
                tensors.require_2d("pixel_decoder.up4.weight", feature_channels * 64, feature_channels)?,
            ]),
        };
        Ok(PixelDecoderParams {
            embed,
            out,
            up_weights,
            leaky_slope: Some(0.01),
        })
    }
}

/// Decode the pyramid to full-resolution pixel embeddings. The three
/// upsampled levels are also returned as taps for deep supervision.
pub fn decode_pyramid(
    pyramid: &FeaturePyramid,
    params: &PixelDecoderParams,
    mode: UpsampleMode,
) -> Result<PixelEmbeddings> {
    let (c, h, w) = pyramid.validate()?;
    let taps: Vec<Array3<f64>> = match mode {
        UpsampleMode::Interpolation => vec![
            bilinear_upsample(pyramid.x2.view(), 2),
            bilinear_upsample(pyramid.x3.view(), 4),
            bilinear_upsample(pyramid.x4.view(), 8),
        ],
        UpsampleMode::DataDependent => {
            let weights = params.up_weights.as_ref().ok_or_else(|| {
                Error::Fixture("data-dependent mode needs up2/up3/up4 weights".into())
            })?;
            vec![
                dupsample(pyramid.x2.view(), weights[0].view(), 2)?,
                dupsample(pyramid.x3.view(), weights[1].view(), 4)?,
                dupsample(pyramid.x4.view(), weights[2].view(), 8)?,
            ]
        }
    };

    let mut concat = Array3::<f64>::zeros((5 * c, h, w));
    for (i, level) in [&pyramid.x0, &pyramid.x1, &taps[0], &taps[1], &taps[2]]
        .into_iter()
        .enumerate()
    {
        if level.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "upsampled level {i} has shape {:?}, expected ({c}, {h}, {w})",
                level.dim()
            )));
        }
        concat.slice_mut(s![i * c..(i + 1) * c, .., ..]).assign(level);
    }

    let mut embeddings = conv1x1(concat.view(), &params.embed)?;
    if let Some(slope) = params.leaky_slope {
        embeddings.mapv_inplace(|v| if v >= 0.0 { v } else { slope * v });
    }
    let pixel = conv1x1(embeddings.view(), &params.out)?;
    Ok(PixelEmbeddings {
        embeddings: pixel,
        taps,
    })
}

/// Per-pixel class logits from a tapped embedding tensor through a 1x1
/// linear head.
pub fn aux_semantic_logits(tap: ArrayView3<f64>, head: &LinearParams) -> Result<Array3<f64>> {
    conv1x1(tap, head)
}

/// Binary mask logits by contracting mask embeddings `(Q, C')` against
/// pixel embeddings `(C', H, W)`.
pub fn predict_masks(
    mask_embeddings: ArrayView2<f64>,
    pixel_embeddings: ArrayView3<f64>,
) -> Result<Array3<f64>> {
    let (q, cq) = mask_embeddings.dim();
    let (c, h, w) = pixel_embeddings.dim();
    if cq != c {
        return Err(Error::Shape(format!(
            "mask embedding width {cq} vs pixel embedding channels {c}"
        )));
    }
    let flat = pixel_embeddings
        .to_shape((c, h * w))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned();
    let logits = mask_embeddings.dot(&flat);
    Ok(logits
        .to_shape((q, h, w))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned())
}
