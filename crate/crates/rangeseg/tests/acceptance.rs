//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line and enforcing its runtime budget. Everything runs on synthetic
//! data and seeded fixtures; no trained weights are involved.

mod common;

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use common::*;
use rangeseg::augment::{weighted_paste_drop, AugmentParams, DropGranularity, PasteDropMode};
use rangeseg::cli::{cmd_infer_merge, InferArgs, PipelineConfig};
use rangeseg::head::{
    decoder_forward, multi_head_attention_with_weights, panoptic_inference, predict_masks,
    random_fixture, semantic_inference, AttentionParams, DecoderConfig, HeadConfig, HeadParams,
    LinearParams, PanopticThresholds, UpsampleMode,
};
use rangeseg::kitti_io::{write_point_cloud, PanopticResult, Point, PointCloud};
use rangeseg::loss::gradcheck::{fd_grad2, fd_grad3, fd_instance, relative_error};
use rangeseg::loss::{
    assignment_cost, boundary_loss, classification_loss, hungarian_match, lovasz_softmax,
    weighted_focal_loss, BalanceStrategy, LossWeights, IGNORE_TARGET,
};
use rangeseg::metrics::{panoptic_report, ConfusionAccumulator, PanopticAccumulator};
use rangeseg::postprocess::{temporal_filter, TemporalWindow};
use rangeseg::projection::{build_range_image, unproject_labels, SensorGeometry};
use rangeseg::stats::{long_tail_split, Task};

#[test]
fn criterion_01_statistics_reproduction() {
    criterion("criterion 1: statistics reproduction", 1.0, || {
        let cfg = kitti_config();
        let stats = published_stats(&cfg);

        for (i, id) in cfg.class_ids().enumerate() {
            let alpha = stats.alpha[id as usize];
            let published = PUBLISHED_ALPHA[i];
            // The published f values carry three significant digits, so the
            // alpha comparison is relative (5%); observed error is < 0.2%.
            let rel = (alpha - published).abs() / published;
            assert!(
                rel < 0.05,
                "alpha[{}] = {alpha:.3} vs published {published:.3} (rel {rel:.2e})",
                cfg.name(id)
            );
            let dw_s = (stats.w_sem[id as usize] - PUBLISHED_W_SEM[i]).abs();
            assert!(
                dw_s <= 0.01,
                "w_sem[{}] = {:.4} vs published {:.4}",
                cfg.name(id),
                stats.w_sem[id as usize],
                PUBLISHED_W_SEM[i]
            );
            let dw_p = (stats.w_pan[id as usize] - PUBLISHED_W_PAN[i]).abs();
            assert!(
                dw_p <= 0.01,
                "w_pan[{}] = {:.4} vs published {:.4}",
                cfg.name(id),
                stats.w_pan[id as usize],
                PUBLISHED_W_PAN[i]
            );
        }

        let names = |flags: &[bool]| -> HashSet<String> {
            cfg.class_ids()
                .filter(|&id| flags[id as usize])
                .map(|id| cfg.name(id).to_string())
                .collect()
        };
        let sem = names(&long_tail_split(&stats, 0.1, Task::Semantic));
        let pan = names(&long_tail_split(&stats, 0.1, Task::Panoptic));
        let expected_sem: HashSet<String> =
            SEMANTIC_LONG_TAIL.iter().map(|s| s.to_string()).collect();
        let expected_pan: HashSet<String> =
            PANOPTIC_LONG_TAIL.iter().map(|s| s.to_string()).collect();
        assert_eq!(sem, expected_sem, "semantic long-tail list");
        assert_eq!(pan, expected_pan, "panoptic long-tail list");
    });
}

#[test]
fn criterion_02_projection_properties() {
    criterion("criterion 2: projection properties", 30.0, || {
        let geom = SensorGeometry::from_degrees(512, 32, 3.0, 25.0).unwrap();
        for trial in 0..100 {
            let cloud = random_cloud(10_000, 1000 + trial);
            let img = build_range_image(&cloud, &geom);

            // Every point lands in bounds.
            let mut by_pixel: HashMap<(usize, usize), (f32, usize)> = HashMap::new();
            for (i, proj) in img.point_to_pixel.iter().enumerate() {
                let p = proj.expect("no zero-range points in the fixture");
                assert!(p.u < geom.width && p.v < geom.height);
                // Brute-force z-buffer: keep the smallest range per pixel
                // (first writer wins ties, matching scan order).
                let entry = by_pixel.entry((p.v, p.u)).or_insert((p.range, i));
                if p.range < entry.0 {
                    *entry = (p.range, i);
                }
            }

            // Nearest-wins against the brute force.
            for (&(v, u), &(min_r, _)) in &by_pixel {
                assert!(img.valid[(v, u)]);
                assert_eq!(
                    img.data[(v, u, rangeseg::projection::CH_RANGE)],
                    min_r,
                    "pixel ({v}, {u}) does not hold the nearest range"
                );
            }

            // Label round trip: a unique tag per pixel reaches exactly the
            // retained point.
            let tags = Array2::from_shape_fn((geom.height, geom.width), |(v, u)| {
                (v * geom.width + u) as u16
            });
            let out = unproject_labels(tags.view(), &img).unwrap();
            for v in 0..geom.height {
                for u in 0..geom.width {
                    if let Some(i) = img.pixel_to_point[(v, u)] {
                        assert_eq!(out[i], tags[(v, u)]);
                    }
                }
            }
        }
    });
}

#[test]
fn criterion_03_loss_gradient_suite() {
    criterion("criterion 3: loss gradient suite", 60.0, || {
        const TOLERANCE: f64 = 1e-4;
        const STEP: f64 = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(30);

        // Focal under all three balance strategies.
        for strategy in [
            BalanceStrategy::None,
            BalanceStrategy::Class,
            BalanceStrategy::Unified,
        ] {
            for _ in 0..50 {
                let c = rng.gen_range(2..=4);
                let h = rng.gen_range(2..=8);
                let w = rng.gen_range(2..=8);
                let mut weights = LossWeights::uniform(c);
                weights.alpha = (0..c).map(|_| rng.gen_range(0.5..20.0)).collect();
                weights.beta = (0..c).map(|_| rng.gen_range(1.0..8.0)).collect();
                weights.gamma = [0.0, 1.0, 2.0][rng.gen_range(0..3)];
                weights.strategy = strategy;
                let (probs, targets) = fd_instance(c, h, w, 0.1, &mut rng);
                let (_, grad) =
                    weighted_focal_loss(probs.view(), targets.view(), &weights).unwrap();
                let fd = fd_grad3(
                    |p| weighted_focal_loss(p.view(), targets.view(), &weights).unwrap().0,
                    &probs,
                    STEP,
                );
                let err =
                    relative_error(grad.as_slice().unwrap(), fd.as_slice().unwrap());
                assert!(err < TOLERANCE, "focal {strategy:?} residual {err:.2e}");
            }
        }

        // Classification over random logits.
        for _ in 0..50 {
            let q = rng.gen_range(1..=8);
            let c = rng.gen_range(2..=4);
            let mut weights = LossWeights::uniform(c);
            weights.no_object_weight = 0.1;
            let logits = Array2::from_shape_fn((q, c + 1), |_| rng.gen_range(-3.0..3.0));
            let targets: Vec<usize> = (0..q).map(|_| rng.gen_range(0..=c)).collect();
            let (_, grad) = classification_loss(logits.view(), &targets, &weights).unwrap();
            let fd = fd_grad2(
                |l| classification_loss(l.view(), &targets, &weights).unwrap().0,
                &logits,
                STEP,
            );
            let err = relative_error(grad.as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < TOLERANCE, "classification residual {err:.2e}");
        }

        // Lovasz.
        for _ in 0..50 {
            let c = rng.gen_range(2..=4);
            let h = rng.gen_range(2..=8);
            let w = rng.gen_range(2..=8);
            let (probs, targets) = fd_instance(c, h, w, 0.1, &mut rng);
            let (_, grad) = lovasz_softmax(probs.view(), targets.view()).unwrap();
            let fd = fd_grad3(
                |p| lovasz_softmax(p.view(), targets.view()).unwrap().0,
                &probs,
                STEP,
            );
            let err = relative_error(grad.as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < TOLERANCE, "lovasz residual {err:.2e}");
        }

        // Boundary.
        for _ in 0..50 {
            let c = rng.gen_range(2..=3);
            let h = rng.gen_range(3..=8);
            let w = rng.gen_range(3..=8);
            let (probs, targets) = fd_instance(c, h, w, 0.0, &mut rng);
            let (_, grad) = boundary_loss(probs.view(), targets.view(), 3).unwrap();
            let fd = fd_grad3(
                |p| boundary_loss(p.view(), targets.view(), 3).unwrap().0,
                &probs,
                STEP,
            );
            let err = relative_error(grad.as_slice().unwrap(), fd.as_slice().unwrap());
            assert!(err < TOLERANCE, "boundary residual {err:.2e}");
        }

        // Focal with gamma 0 and no balancing reduces to cross-entropy.
        let (probs, targets) = fd_instance(3, 8, 8, 0.0, &mut rng);
        let mut weights = LossWeights::uniform(3);
        weights.gamma = 0.0;
        weights.strategy = BalanceStrategy::None;
        let (focal, _) = weighted_focal_loss(probs.view(), targets.view(), &weights).unwrap();
        let mut ce = 0.0;
        let mut count = 0usize;
        for ((y, x), &t) in targets.indexed_iter() {
            if t != IGNORE_TARGET {
                ce -= probs[(t, y, x)].ln();
                count += 1;
            }
        }
        ce /= count as f64;
        assert!(
            (focal - ce).abs() < 1e-10,
            "focal(gamma = 0, none) vs CE delta {:.2e}",
            (focal - ce).abs()
        );
    });
}

#[test]
fn criterion_04_matching_optimality() {
    criterion("criterion 4: matching optimality", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..1000 {
            let q = rng.gen_range(1..=7);
            let t = rng.gen_range(0..=q);
            // Integer-valued costs keep both summation routes exact, so
            // the totals must agree bit for bit.
            let cost = Array2::from_shape_fn((q, t), |_| rng.gen_range(0..1000) as f64);
            let pairs = hungarian_match(cost.view()).unwrap();
            assert_eq!(pairs.len(), t);
            let mut used: HashSet<usize> = HashSet::new();
            for &(query, _) in &pairs {
                assert!(used.insert(query), "query assigned twice");
            }
            let total = assignment_cost(cost.view(), &pairs);
            let best = brute_force_assignment(cost.view());
            assert_eq!(total, best, "suboptimal assignment on {cost:?}");
        }
    });
}

#[test]
fn criterion_05_inference_merge_oracles() {
    criterion("criterion 5: inference-merge oracles", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(50);

        // Semantic inference vs the direct summation oracle.
        for _ in 0..500 {
            let q = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=3);
            let class_logits = Array2::from_shape_fn((q, k + 1), |_| rng.gen_range(-2.0..2.0));
            let mask_logits = Array3::from_shape_fn((q, 4, 4), |_| rng.gen_range(-3.0..3.0));
            let got = semantic_inference(class_logits.view(), mask_logits.view()).unwrap();
            for y in 0..4 {
                for x in 0..4 {
                    let mut scores = vec![0.0f64; k];
                    for qi in 0..q {
                        let row: Vec<f64> = class_logits.row(qi).iter().copied().collect();
                        let z: f64 = row.iter().map(|l| l.exp()).sum();
                        let m = 1.0 / (1.0 + (-mask_logits[(qi, y, x)]).exp());
                        for (c, s) in scores.iter_mut().enumerate() {
                            *s += row[c].exp() / z * m;
                        }
                    }
                    let mut best = 0usize;
                    for c in 1..k {
                        if scores[c] > scores[best] {
                            best = c;
                        }
                    }
                    assert_eq!(got[(y, x)], best, "semantic argmax mismatch at ({y},{x})");
                }
            }
        }

        // Hand-traced 3x3 panoptic fixtures.
        let hard = |masks: &[Array2<bool>]| {
            Array3::from_shape_fn((masks.len(), 3, 3), |(q, y, x)| {
                if masks[q][(y, x)] {
                    25.0
                } else {
                    -25.0
                }
            })
        };
        let one_hot = |classes: &[usize], columns: usize| {
            Array2::from_shape_fn((classes.len(), columns), |(q, c)| {
                if classes[q] == c {
                    40.0
                } else {
                    0.0
                }
            })
        };
        let loose = PanopticThresholds {
            object_score: 0.8,
            overlap: 0.2,
        };

        // Id uniqueness: two confident things of the same class.
        let top = Array2::from_shape_fn((3, 3), |(y, _)| y == 0);
        let bottom = Array2::from_shape_fn((3, 3), |(y, _)| y == 2);
        let map = panoptic_inference(
            one_hot(&[0, 0], 2).view(),
            hard(&[top.clone(), bottom.clone()]).view(),
            &[true],
            &loose,
        )
        .unwrap();
        assert_ne!(map.instance_ids[(0, 0)], map.instance_ids[(2, 0)]);
        assert!(map.instance_ids[(0, 0)] > 0 && map.instance_ids[(2, 0)] > 0);

        // Stuff merge: same two queries as one stuff class share one id.
        let map = panoptic_inference(
            one_hot(&[0, 0], 2).view(),
            hard(&[top, bottom]).view(),
            &[false],
            &loose,
        )
        .unwrap();
        assert_eq!(map.instance_ids[(0, 0)], map.instance_ids[(2, 0)]);

        // Discard: a one-row query fully dominated by a full-image query
        // retains none of its soft area and is removed; its pixels go to
        // the survivor.
        let class_logits = ndarray::array![[8.0, 0.0, 0.0], [7.0, 0.0, 0.0]];
        let mut mask_logits = Array3::from_elem((2, 3, 3), -25.0);
        for y in 0..3 {
            for x in 0..3 {
                mask_logits[(0, y, x)] = 25.0;
            }
        }
        for x in 0..3 {
            mask_logits[(1, 1, x)] = 25.0;
        }
        let map = panoptic_inference(
            class_logits.view(),
            mask_logits.view(),
            &[true, true],
            &PanopticThresholds::default(),
        )
        .unwrap();
        let first = map.instance_ids[(0, 0)];
        assert!(first > 0);
        assert!(map.instance_ids.iter().all(|&i| i == first));
    });
}

#[test]
fn criterion_06_metric_identities() {
    criterion("criterion 6: metric identities", 10.0, || {
        let cfg = kitti_config();
        let mut rng = ChaCha8Rng::seed_from_u64(60);

        let random_result = |rng: &mut ChaCha8Rng, n: usize| {
            let sem: Vec<u16> = (0..n).map(|_| rng.gen_range(0..=19u16)).collect();
            let inst: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4u32)).collect();
            PanopticResult::new(sem, inst).unwrap()
        };

        // PQ = RQ * SQ on random segmentations.
        for _ in 0..20 {
            let n = rng.gen_range(50..200);
            let gt = random_result(&mut rng, n);
            let pred = random_result(&mut rng, n);
            let mut acc = PanopticAccumulator::new(&cfg);
            acc.accumulate(&pred, &gt, &cfg).unwrap();
            let report = panoptic_report(&acc, &cfg);
            for class in &report.per_class {
                if class.tp > 0 {
                    assert!(
                        (class.pq - class.rq * class.sq).abs() < 1e-12,
                        "PQ != RQ * SQ for {}",
                        class.name
                    );
                }
            }
        }

        // Self-evaluation scores 1 everywhere.
        let gt = random_result(&mut rng, 500);
        let mut conf = ConfusionAccumulator::new(&cfg);
        conf.accumulate(&gt.semantic, &gt.semantic).unwrap();
        assert_eq!(conf.miou().1, Some(1.0));
        let mut acc = PanopticAccumulator::new(&cfg);
        acc.accumulate(&gt.clone(), &gt, &cfg).unwrap();
        let report = panoptic_report(&acc, &cfg);
        assert_eq!(report.pq, Some(1.0));
        assert_eq!(report.rq, Some(1.0));
        assert_eq!(report.sq, Some(1.0));

        // Single-segment IoU fixtures: 0.6 matches, 0.4 does not.
        let gt = PanopticResult::new(vec![1; 5], vec![7; 5]).unwrap();
        let pred = PanopticResult::new(vec![1, 1, 1, 2, 2], vec![3, 3, 3, 0, 0]).unwrap();
        let mut acc = PanopticAccumulator::new(&cfg);
        acc.accumulate(&pred, &gt, &cfg).unwrap();
        let report = panoptic_report(&acc, &cfg);
        let car = &report.per_class[0];
        assert!((car.pq - 0.6).abs() < 1e-12);
        assert!((car.rq - 1.0).abs() < 1e-12);
        assert!((car.sq - 0.6).abs() < 1e-12);

        let pred = PanopticResult::new(vec![1, 1, 2, 2, 2], vec![3, 3, 0, 0, 0]).unwrap();
        let mut acc = PanopticAccumulator::new(&cfg);
        acc.accumulate(&pred, &gt, &cfg).unwrap();
        let report = panoptic_report(&acc, &cfg);
        assert_eq!(report.per_class[0].pq, 0.0);
        assert_eq!(report.per_class[0].tp, 0);

        // Merge associativity over three random shards.
        let frames: Vec<(PanopticResult, PanopticResult)> = (0..9)
            .map(|_| {
                let n = rng.gen_range(20..80);
                (random_result(&mut rng, n), random_result(&mut rng, n))
            })
            .collect();
        let mut whole = PanopticAccumulator::new(&cfg);
        let mut conf_whole = ConfusionAccumulator::new(&cfg);
        for (pred, gt) in &frames {
            whole.accumulate(pred, gt, &cfg).unwrap();
            conf_whole.accumulate(&pred.semantic, &gt.semantic).unwrap();
        }
        let mut shards: Vec<PanopticAccumulator> =
            (0..3).map(|_| PanopticAccumulator::new(&cfg)).collect();
        let mut conf_shards: Vec<ConfusionAccumulator> =
            (0..3).map(|_| ConfusionAccumulator::new(&cfg)).collect();
        for (i, (pred, gt)) in frames.iter().enumerate() {
            shards[i % 3].accumulate(pred, gt, &cfg).unwrap();
            conf_shards[i % 3]
                .accumulate(&pred.semantic, &gt.semantic)
                .unwrap();
        }
        // ((s0 + s1) + s2) and (s0 + (s1 + s2)) both equal the single pass.
        let mut left = PanopticAccumulator::new(&cfg);
        left.merge(&shards[0]);
        left.merge(&shards[1]);
        left.merge(&shards[2]);
        let mut right_tail = PanopticAccumulator::new(&cfg);
        right_tail.merge(&shards[1]);
        right_tail.merge(&shards[2]);
        let mut right = PanopticAccumulator::new(&cfg);
        right.merge(&shards[0]);
        right.merge(&right_tail);
        assert_eq!(left, whole);
        assert_eq!(right, whole);
        let mut conf_merged = ConfusionAccumulator::new(&cfg);
        for shard in &conf_shards {
            conf_merged.merge(shard);
        }
        assert_eq!(conf_merged, conf_whole);
    });
}

#[test]
fn criterion_07_paste_drop_statistics() {
    criterion("criterion 7: weighted paste/drop statistics", 60.0, || {
        let cfg = kitti_config();
        let stats = published_stats(&cfg);
        let threshold = 0.1;
        let long_tail = long_tail_split(&stats, threshold, Task::Semantic);

        // Frame 2 carries one instance of every long-tail class; frame 1
        // carries only non-long-tail classes.
        let mut frame2_entries = Vec::new();
        let mut frame1_entries = Vec::new();
        for id in cfg.class_ids() {
            if long_tail[id as usize] {
                for k in 0..3 {
                    frame2_entries.push((id, 1u32, k));
                }
            } else {
                for k in 0..2 {
                    frame1_entries.push((id, 0u32, k));
                }
            }
        }
        let build = |entries: &[(u16, u32, i32)]| {
            PointCloud::with_labels(
                entries
                    .iter()
                    .map(|&(id, _, k)| Point::new(5.0 + id as f32, k as f32, 0.0, 0.0))
                    .collect(),
                entries.iter().map(|e| e.0).collect(),
                entries.iter().map(|e| e.1).collect(),
            )
            .unwrap()
        };
        let frame1 = build(&frame1_entries);
        let frame2 = build(&frame2_entries);
        let frame1_counts: HashMap<u16, usize> =
            cfg.class_ids()
                .map(|id| (id, frame1.semantic.iter().filter(|&&s| s == id).count()))
                .collect();

        let params = AugmentParams {
            p_flip: 0.0,
            rot_range: 0.0,
            trans_range: 0.0,
            p_point_drop: 0.0,
            threshold,
            task: Task::Semantic,
            seed: 0,
            drop_granularity: DropGranularity::WholeClass,
            mode: PasteDropMode::PasteDrop,
        };

        const TRIALS: usize = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let mut pasted = HashMap::<u16, usize>::new();
        let mut dropped = HashMap::<u16, usize>::new();
        for _ in 0..TRIALS {
            let out = weighted_paste_drop(&frame1, &frame2, &stats, &params, &cfg, &mut rng);
            let mut present: HashSet<u16> = HashSet::new();
            let mut counts = HashMap::<u16, usize>::new();
            for &s in &out.semantic {
                present.insert(s);
                *counts.entry(s).or_insert(0) += 1;
            }
            for id in cfg.class_ids() {
                if long_tail[id as usize] {
                    if present.contains(&id) {
                        *pasted.entry(id).or_insert(0) += 1;
                    }
                } else {
                    if !present.contains(&id) {
                        *dropped.entry(id).or_insert(0) += 1;
                    }
                    // No pasted point may carry a non-long-tail class.
                    assert!(
                        counts.get(&id).copied().unwrap_or(0) <= frame1_counts[&id],
                        "non-long-tail class {} gained points",
                        cfg.name(id)
                    );
                }
            }
        }

        for id in cfg.class_ids() {
            let w = stats.w_sem[id as usize];
            if long_tail[id as usize] {
                let p = (w - threshold).clamp(0.0, 1.0);
                let se = (p * (1.0 - p) / TRIALS as f64).sqrt();
                let observed = pasted.get(&id).copied().unwrap_or(0) as f64 / TRIALS as f64;
                assert!(
                    (observed - p).abs() <= 3.0 * se,
                    "paste rate of {}: observed {observed:.4}, expected {p:.4} (3 SE = {:.4})",
                    cfg.name(id),
                    3.0 * se
                );
            } else {
                let d = (threshold - w).clamp(0.0, 1.0);
                let se = (d * (1.0 - d) / TRIALS as f64).sqrt();
                let observed = dropped.get(&id).copied().unwrap_or(0) as f64 / TRIALS as f64;
                assert!(
                    (observed - d).abs() <= 3.0 * se,
                    "drop rate of {}: observed {observed:.4}, expected {d:.4} (3 SE = {:.4})",
                    cfg.name(id),
                    3.0 * se
                );
            }
        }
    });
}

#[test]
fn criterion_08_head_invariants() {
    criterion("criterion 8: head invariants", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(80);

        // Attention rows sum to one for all heads.
        let dim = 8;
        let mut linear = |rows: usize, cols: usize| {
            LinearParams::new(
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-0.5..0.5)),
                ndarray::Array1::from_shape_fn(rows, |_| rng.gen_range(-0.1..0.1)),
            )
            .unwrap()
        };
        let attn = AttentionParams {
            query: linear(dim, dim),
            key: linear(dim, dim),
            value: linear(dim, dim),
            output: linear(dim, dim),
            num_heads: 4,
        };
        let q = Array2::from_shape_fn((6, dim), |_| rng.gen_range(-1.0..1.0));
        let kv = Array2::from_shape_fn((9, dim), |_| rng.gen_range(-1.0..1.0));
        let (_, weights) =
            multi_head_attention_with_weights(q.view(), kv.view(), kv.view(), &attn).unwrap();
        for h in 0..4 {
            for row in weights.index_axis(ndarray::Axis(0), h).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }

        // Decoder equivariance and semantic-inference invariance under a
        // query permutation.
        let head_cfg = HeadConfig {
            decoder: DecoderConfig {
                num_layers: 3,
                num_queries: 5,
                embed_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
            },
            feature_channels: 4,
            embed_channels: 8,
            pixel_channels: 8,
            num_classes: 3,
            upsample: UpsampleMode::Interpolation,
        };
        let params = HeadParams::from_tensors(&random_fixture(&head_cfg, 81), &head_cfg).unwrap();
        let memory = Array2::from_shape_fn((12, 4), |_| rng.gen_range(-1.0..1.0));
        let queries = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        let out = decoder_forward(
            queries.view(),
            memory.view(),
            &head_cfg.decoder,
            &params.decoder,
            true,
        )
        .unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let permuted_queries = Array2::from_shape_fn((5, 8), |(i, j)| queries[(perm[i], j)]);
        let out_p = decoder_forward(
            permuted_queries.view(),
            memory.view(),
            &head_cfg.decoder,
            &params.decoder,
            false,
        )
        .unwrap();
        for i in 0..5 {
            for j in 0..out.class_logits.dim().1 {
                assert!(
                    (out_p.class_logits[(i, j)] - out.class_logits[(perm[i], j)]).abs() < 1e-9
                );
            }
            for j in 0..out.mask_embeddings.dim().1 {
                assert!(
                    (out_p.mask_embeddings[(i, j)] - out.mask_embeddings[(perm[i], j)]).abs()
                        < 1e-9
                );
            }
        }

        // Per-layer aux route: one auxiliary prediction per decoder layer.
        assert_eq!(
            out.per_layer.as_ref().unwrap().len(),
            head_cfg.decoder.num_layers
        );

        let pixel = Array3::from_shape_fn((8, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let masks = predict_masks(out.mask_embeddings.view(), pixel.view()).unwrap();
        let masks_p = predict_masks(out_p.mask_embeddings.view(), pixel.view()).unwrap();
        let sem = semantic_inference(out.class_logits.view(), masks.view()).unwrap();
        let sem_p = semantic_inference(out_p.class_logits.view(), masks_p.view()).unwrap();
        assert_eq!(sem, sem_p, "semantic inference changed under permutation");

        // Pixel-tap aux route: exactly three upsampled taps.
        let pyramid = rangeseg::head::FeaturePyramid {
            x0: Array3::from_elem((4, 8, 16), 0.5),
            x1: Array3::from_elem((4, 8, 16), 0.25),
            x2: Array3::from_elem((4, 4, 8), -0.5),
            x3: Array3::from_elem((4, 2, 4), 1.0),
            x4: Array3::from_elem((4, 1, 2), -1.0),
        };
        let decoded = rangeseg::head::decode_pyramid(
            &pyramid,
            &params.pixel_decoder,
            UpsampleMode::Interpolation,
        )
        .unwrap();
        assert_eq!(decoded.taps.len(), 3);

        // Data-dependent upsampling against the index-arithmetic oracle.
        for _ in 0..20 {
            let c_in = rng.gen_range(1..=3);
            let c_out = rng.gen_range(1..=3);
            let s = [2usize, 4][rng.gen_range(0..2)];
            let h = rng.gen_range(1..=3);
            let w = rng.gen_range(1..=3);
            let feat = Array3::from_shape_fn((c_in, h, w), |_| rng.gen_range(-1.0..1.0));
            let weight =
                Array2::from_shape_fn((c_out * s * s, c_in), |_| rng.gen_range(-1.0..1.0));
            let up = rangeseg::head::dupsample(feat.view(), weight.view(), s).unwrap();
            assert_eq!(up.dim(), (c_out, h * s, w * s));
            for y in 0..h {
                for x in 0..w {
                    for row in 0..c_out * s * s {
                        let mut acc = 0.0;
                        for ch in 0..c_in {
                            acc += weight[(row, ch)] * feat[(ch, y, x)];
                        }
                        let co = row / (s * s);
                        let dy = (row % (s * s)) / s;
                        let dx = row % s;
                        assert!(
                            (up[(co, y * s + dy, x * s + dx)] - acc).abs() < 1e-12,
                            "dupsample index mismatch"
                        );
                    }
                }
            }
        }
    });
}

fn infer_config(dir: &std::path::Path) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.seed = 4242;
    config.class_config = std::path::PathBuf::from(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/data/semantic-kitti.toml"
    ));
    config.geometry.width = 64;
    config.geometry.height = 16;
    config.head.num_layers = 2;
    config.head.num_queries = 8;
    config.head.embed_dim = 8;
    config.head.num_heads = 2;
    config.head.ffn_dim = 16;
    config.head.feature_channels = 8;
    config.head.embed_channels = 16;
    config.head.pixel_channels = 8;
    config.temporal.k_prev = 1;
    config.temporal.l_next = 0;
    // Random fixtures spread class probability almost uniformly; a low
    // object threshold keeps queries alive so the totality check bites.
    config.inference.tau_obj = 0.04;
    config.inference.tau_ovl = 0.2;
    config.output_dir = dir.to_path_buf();
    config
}

#[test]
fn criterion_09_end_to_end_determinism() {
    criterion("criterion 9: end-to-end determinism", 30.0, || {
        let dir = tempfile::tempdir().unwrap();
        let scan_dir = dir.path().join("scans");
        std::fs::create_dir_all(&scan_dir).unwrap();
        for (i, seed) in [(0, 90u64), (1, 91), (2, 92)] {
            let cloud = random_cloud(2000, seed);
            write_point_cloud(scan_dir.join(format!("{i:06}.bin")), &cloud).unwrap();
        }
        let config = infer_config(dir.path());
        let fixture = dir.path().join("params.rsnt");

        let run = |label: &str, workers: usize| -> Vec<Vec<u8>> {
            let out_dir = dir.path().join(label);
            let outputs = cmd_infer_merge(
                &config,
                &InferArgs {
                    fixture: fixture.clone(),
                    create_fixture: true,
                    scans: scan_dir.clone(),
                    output_dir: out_dir,
                    workers,
                    task: Some(Task::Panoptic),
                    disable_knn: false,
                },
            )
            .unwrap();
            assert_eq!(outputs.len(), 3);
            outputs
                .iter()
                .map(|p| std::fs::read(p).unwrap())
                .collect()
        };

        let first = run("run1", 1);
        let second = run("run2", 1);
        let wide = run("run8", 8);
        assert_eq!(first, second, "two single-worker runs differ");
        assert_eq!(first, wide, "worker count changed the output");

        // Totality: every point got a valid (non-ignore) class word.
        let cfg = kitti_config();
        for bytes in &first {
            assert_eq!(bytes.len() % 4, 0);
            assert_eq!(bytes.len() / 4, 2000);
            for word in bytes.chunks_exact(4) {
                let raw = u16::from_le_bytes([word[0], word[1]]);
                let train = cfg.remap_raw(raw);
                assert_ne!(train, cfg.ignore_id(), "point left without a class");
            }
        }
    });
}

#[test]
fn criterion_10_temporal_filter() {
    criterion("criterion 10: temporal filter", 5.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(100);

        // Window of size one is the identity.
        let logits = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-2.0..2.0));
        let mut window = TemporalWindow::new(0, 0);
        window.push(logits.clone()).unwrap();
        assert_eq!(temporal_filter(&window).unwrap(), logits);

        // Mean of constants is the constant.
        let mut window = TemporalWindow::new(2, 0);
        for _ in 0..3 {
            window.push(logits.clone()).unwrap();
        }
        assert_eq!(temporal_filter(&window).unwrap(), logits);

        // Identical per-frame logits leave the panoptic output unchanged.
        let q = 4;
        let k = 3;
        let class_logits = Array2::from_shape_fn((q, k + 1), |_| rng.gen_range(-3.0..3.0));
        let mask_logits = Array3::from_shape_fn((q, 5, 5), |_| rng.gen_range(-4.0..4.0));
        let thresholds = PanopticThresholds {
            object_score: 0.3,
            overlap: 0.2,
        };
        let is_thing = [true, false, true];
        let direct = panoptic_inference(
            class_logits.view(),
            mask_logits.view(),
            &is_thing,
            &thresholds,
        )
        .unwrap();

        let mut window = TemporalWindow::new(2, 0);
        for _ in 0..3 {
            window.push(class_logits.clone()).unwrap();
        }
        let filtered = temporal_filter(&window).unwrap();
        let via_filter = panoptic_inference(
            filtered.view(),
            mask_logits.view(),
            &is_thing,
            &thresholds,
        )
        .unwrap();
        assert_eq!(direct.classes, via_filter.classes);
        assert_eq!(direct.instance_ids, via_filter.instance_ids);
    });
}
