//! Fixture-scale inference pipeline: projection, a stand-in feature
//! pyramid, the mask-classification head, inference merging, and the
//! projection back to points.
//!
//! The trained backbone is out of scope; a fixed 1x1 stem plus average
//! pooling produces the pyramid deterministically from the projected scan.

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::head::{
    decode_pyramid, decoder_forward, panoptic_inference, predict_masks, semantic_inference,
    FeaturePyramid, HeadConfig, HeadParams, LinearParams, PanopticThresholds, PixelEmbeddings,
    QueryOutputs, VOID_CLASS,
};
use crate::kitti_io::{ClassConfig, PanopticResult, PointCloud};
use crate::postprocess::{knn_clean, KnnParams};
use crate::projection::{build_range_image, unproject_labels, RangeImage, SensorGeometry};
use crate::stats::Task;

/// The projected scan as (5, H, W) input channels, widened to f64.
pub fn input_channels(img: &RangeImage) -> Array3<f64> {
    let (h, w, c) = img.data.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| img.data[(y, x, ch)] as f64)
}

fn avg_pool2(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        0.25 * (x[(ch, 2 * y, 2 * xx)]
            + x[(ch, 2 * y, 2 * xx + 1)]
            + x[(ch, 2 * y + 1, 2 * xx)]
            + x[(ch, 2 * y + 1, 2 * xx + 1)])
    })
}

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
    let rows = params.weight.dim().0;
    Ok(mixed
        .to_shape((rows, h, w))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned())
}

/// Stand-in backbone: stem the 5 input channels into feature space, then
/// halve resolution three times by average pooling.
pub fn stand_in_pyramid(input: ArrayView3<f64>, stem: &LinearParams) -> Result<FeaturePyramid> {
    let (_, h, w) = input.dim();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} must be divisible by 8 for the feature pyramid"
        )));
    }
    let x0 = conv1x1(input, stem)?;
    let x1 = x0.clone();
    let x2 = avg_pool2(x1.view());
    let x3 = avg_pool2(x2.view());
    let x4 = avg_pool2(x3.view());
    Ok(FeaturePyramid { x0, x1, x2, x3, x4 })
}

/// Everything the per-frame forward produces before inference merging.
pub struct FrameForward {
    pub image: RangeImage,
    pub pixel: PixelEmbeddings,
    pub outputs: QueryOutputs,
}

pub fn forward_frame(
    cloud: &PointCloud,
    geom: &SensorGeometry,
    head_cfg: &HeadConfig,
    params: &HeadParams,
) -> Result<FrameForward> {
    let image = build_range_image(cloud, geom);
    let input = input_channels(&image);
    let pyramid = stand_in_pyramid(input.view(), &params.stem)?;
    let memory_src = &pyramid.x4;
    let (c, mh, mw) = memory_src.dim();
    let memory = memory_src
        .to_shape((c, mh * mw))
        .map_err(|e| Error::Shape(e.to_string()))?
        .t()
        .to_owned();
    let pixel = decode_pyramid(&pyramid, &params.pixel_decoder, head_cfg.upsample)?;
    let outputs = decoder_forward(
        params.decoder.query_embed.view(),
        memory.view(),
        &head_cfg.decoder,
        &params.decoder,
        false,
    )?;
    Ok(FrameForward {
        image,
        pixel,
        outputs,
    })
}

/// Merge query predictions to a per-pixel train-id map (and instance map
/// for the panoptic task). Void pixels map to the ignore id.
pub fn merge_to_maps(
    class_logits: &Array2<f64>,
    forward: &FrameForward,
    cfg: &ClassConfig,
    task: Task,
    thresholds: &PanopticThresholds,
) -> Result<(Array2<u16>, Array2<u32>)> {
    let mask_logits = predict_masks(
        forward.outputs.mask_embeddings.view(),
        forward.pixel.embeddings.view(),
    )?;
    let (h, w) = (mask_logits.dim().1, mask_logits.dim().2);
    match task {
        Task::Semantic => {
            let channels = semantic_inference(class_logits.view(), mask_logits.view())?;
            let sem = channels.mapv(|c| cfg.train_of_channel(c));
            Ok((sem, Array2::zeros((h, w))))
        }
        Task::Panoptic => {
            let map = panoptic_inference(
                class_logits.view(),
                mask_logits.view(),
                &cfg.thing_channels(),
                thresholds,
            )?;
            let sem = map.classes.mapv(|c| {
                if c == VOID_CLASS {
                    cfg.ignore_id()
                } else {
                    cfg.train_of_channel(c)
                }
            });
            Ok((sem, map.instance_ids))
        }
    }
}

/// Project the per-pixel maps back to the points and clean the semantic
/// labels with range-image KNN. Points whose class was corrected by KNN
/// lose their pixel's instance id.
pub fn maps_to_points(
    sem_map: &Array2<u16>,
    inst_map: &Array2<u32>,
    image: &RangeImage,
    knn: Option<&KnnParams>,
) -> Result<PanopticResult> {
    let raw_sem = unproject_labels(sem_map.view(), image)?;
    let instance: Vec<u32> = image
        .point_to_pixel
        .iter()
        .map(|proj| proj.map_or(0, |p| inst_map[(p.v, p.u)]))
        .collect();
    let semantic = match knn {
        Some(params) => knn_clean(sem_map.view(), image, params)?,
        None => raw_sem.clone(),
    };
    let instance = semantic
        .iter()
        .zip(&raw_sem)
        .zip(instance)
        .map(|((clean, raw), inst)| if clean == raw { inst } else { 0 })
        .collect();
    PanopticResult::new(semantic, instance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{random_fixture, DecoderConfig, UpsampleMode};
    use crate::kitti_io::Point;

    fn desk_head() -> HeadConfig {
        HeadConfig {
            decoder: DecoderConfig {
                num_layers: 2,
                num_queries: 6,
                embed_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
            },
            feature_channels: 4,
            embed_channels: 8,
            pixel_channels: 8,
            num_classes: 3,
            upsample: UpsampleMode::Interpolation,
        }
    }

    fn synthetic_cloud(n: usize, seed: u64) -> PointCloud {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    let yaw = rng.gen_range(-3.1..3.1f64);
                    let r = rng.gen_range(2.0..40.0f64);
                    Point::new(
                        (r * yaw.cos()) as f32,
                        (r * yaw.sin()) as f32,
                        rng.gen_range(-2.0..0.5),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn forward_and_merge_label_every_point() {
        let head_cfg = desk_head();
        let params =
            HeadParams::from_tensors(&random_fixture(&head_cfg, 3), &head_cfg).unwrap();
        let geom = SensorGeometry::from_degrees(32, 8, 3.0, 25.0).unwrap();
        let cloud = synthetic_cloud(300, 1);
        let cfg = crate::kitti_io::parse_class_config(
            r#"
num_classes = 3
[[classes]]
id = 1
name = "a"
thing = true
raw = [10]
[[classes]]
id = 2
name = "b"
thing = false
raw = [40]
[[classes]]
id = 3
name = "c"
thing = false
raw = [50]
"#,
        )
        .unwrap();

        for task in [Task::Semantic, Task::Panoptic] {
            let fwd = forward_frame(&cloud, &geom, &head_cfg, &params).unwrap();
            let (sem, inst) = merge_to_maps(
                &fwd.outputs.class_logits.clone(),
                &fwd,
                &cfg,
                task,
                &PanopticThresholds::default(),
            )
            .unwrap();
            let result =
                maps_to_points(&sem, &inst, &fwd.image, Some(&KnnParams::default())).unwrap();
            assert_eq!(result.len(), cloud.len());
            for &s in &result.semantic {
                assert!(s as usize <= 3);
            }
        }
    }

    #[test]
    fn pyramid_needs_divisible_dimensions() {
        let head_cfg = desk_head();
        let params =
            HeadParams::from_tensors(&random_fixture(&head_cfg, 3), &head_cfg).unwrap();
        let geom = SensorGeometry::from_degrees(30, 6, 3.0, 25.0).unwrap();
        let cloud = synthetic_cloud(10, 2);
        assert!(matches!(
            forward_frame(&cloud, &geom, &head_cfg, &params),
            Err(Error::Shape(_))
        ));
    }
}
