//! Subcommand implementations. Each takes the pipeline configuration plus
//! its own argument struct so tests can drive commands directly.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::weighted_paste_drop;
use crate::error::{Error, Result};
use crate::head::{random_fixture, HeadParams, NamedTensors};
use crate::kitti_io::{
    load_class_config, read_labels, read_point_cloud, write_labels, write_point_cloud,
    ClassConfig, PanopticResult, PointCloud,
};
use crate::loss::gradcheck::{fd_grad2, fd_grad3, fd_instance, relative_error};
use crate::loss::{
    classification_loss, boundary_loss, lovasz_softmax, weighted_focal_loss, BalanceStrategy,
    LossWeights,
};
use crate::metrics::{
    accumulate_panoptic, accumulate_semantic, panoptic_report, ConfusionAccumulator,
    PanopticAccumulator,
};
use crate::postprocess::{knn_clean, temporal_filter, TemporalWindow};
use crate::projection::build_range_image;
use crate::stats::{
    finalize, finalize_from_fixture, load_stats, save_stats, ClassStats, StatsAccumulator,
    Task, DEFAULT_EPS,
};

use super::config::{require_exists, PipelineConfig};
use super::pipeline::{forward_frame, maps_to_points, merge_to_maps};
use super::render::render_range_image;

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))
}

fn sorted_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == extension))
        .collect();
    files.sort();
    Ok(files)
}

// ----------------------------------------------------------------------
// stats
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StatsArgs {
    /// Stats document destination; defaults to the configured stats path.
    pub output: Option<PathBuf>,
    /// Derive the table from a published-proportions fixture instead of
    /// scanning the dataset.
    pub published: Option<PathBuf>,
    pub workers: usize,
}

pub fn cmd_stats(config: &PipelineConfig, args: &StatsArgs) -> Result<ClassStats> {
    let class_cfg = load_class_config(&config.class_config)?;
    let stats = match &args.published {
        Some(fixture) => {
            require_exists(fixture, "published statistics fixture")?;
            finalize_from_fixture(fixture, &class_cfg)?
        }
        None => {
            let frames = collect_training_frames(config)?;
            if frames.is_empty() {
                return Err(Error::EmptyDataset(format!(
                    "no labeled frames under {}",
                    config.dataset.root.display()
                )));
            }
            let pool = thread_pool(args.workers)?;
            let acc = pool.install(|| {
                frames
                    .par_iter()
                    .map(|(scan, label)| {
                        let mut cloud = read_point_cloud(scan)?;
                        let (sem, inst) = read_labels(label, &class_cfg)?;
                        cloud.attach_labels(sem, inst)?;
                        let mut acc = StatsAccumulator::new(class_cfg.num_classes());
                        acc.accumulate_frame(&cloud, &class_cfg);
                        Ok(acc)
                    })
                    .try_reduce(
                        || StatsAccumulator::new(class_cfg.num_classes()),
                        |mut a, b| {
                            a.merge(&b);
                            Ok(a)
                        },
                    )
            })?;
            finalize(&acc, DEFAULT_EPS, &class_cfg)?
        }
    };
    let output = args.output.clone().unwrap_or_else(|| config.stats_path.clone());
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    save_stats(&output, &stats, &class_cfg)?;
    print_stats_table(&stats, &class_cfg);
    Ok(stats)
}

fn collect_training_frames(config: &PipelineConfig) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut frames = Vec::new();
    for sequence in &config.dataset.train_sequences {
        let seq_dir = config.sequence_dir(sequence);
        let scan_dir = seq_dir.join("velodyne");
        if !scan_dir.is_dir() {
            continue;
        }
        for scan in sorted_files(&scan_dir, "bin")? {
            let stem = scan.file_stem().unwrap_or_default().to_os_string();
            let label = seq_dir.join("labels").join(&stem).with_extension("label");
            if !label.exists() {
                return Err(Error::Dataset(format!(
                    "missing label file for scan {}",
                    scan.display()
                )));
            }
            frames.push((scan, label));
        }
    }
    Ok(frames)
}

fn print_stats_table(stats: &ClassStats, cfg: &ClassConfig) {
    let ids: Vec<u16> = cfg.class_ids().collect();
    let name_width = ids
        .iter()
        .map(|&id| cfg.name(id).len())
        .max()
        .unwrap_or(8)
        .max(8);
    println!(
        "{:<name_width$} {:>10} {:>9} {:>6} {:>8} {:>8} {:>6} {:>10} {:>6}",
        "class", "f", "alpha", "w_s", "sem", "ins", "beta", "alpha*beta", "w_p"
    );
    for &id in &ids {
        let i = id as usize;
        println!(
            "{:<name_width$} {:>10.3e} {:>9.2} {:>6.2} {:>8} {:>8} {:>6.2} {:>10.2} {:>6.2}",
            cfg.name(id),
            stats.f[i],
            stats.alpha[i],
            stats.w_sem[i],
            stats.sem[i],
            stats.ins[i],
            stats.beta[i],
            stats.alpha[i] * stats.beta[i],
            stats.w_pan[i],
        );
    }
    let list = |flags: &[bool]| {
        ids.iter()
            .filter(|&&id| flags[id as usize])
            .map(|&id| cfg.name(id))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("long-tail (semantic): {}", list(&stats.long_tail_sem));
    println!("long-tail (panoptic): {}", list(&stats.long_tail_pan));
}

// ----------------------------------------------------------------------
// augment
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AugmentArgs {
    pub frame_a: PathBuf,
    pub labels_a: PathBuf,
    pub frame_b: PathBuf,
    pub labels_b: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub render: bool,
}

#[derive(Debug)]
pub struct AugmentOutput {
    pub scan: PathBuf,
    pub labels: PathBuf,
    pub render: Option<PathBuf>,
}

pub fn cmd_augment(config: &PipelineConfig, args: &AugmentArgs) -> Result<AugmentOutput> {
    let class_cfg = load_class_config(&config.class_config)?;
    if !config.stats_path.exists() {
        return Err(Error::ConfigValidation(format!(
            "stats document not found at {}; run the stats subcommand first",
            config.stats_path.display()
        )));
    }
    let stats = load_stats(&config.stats_path)?;
    let params = config.augment.build(config.seed)?;

    let load = |scan: &Path, label: &Path| -> Result<PointCloud> {
        let mut cloud = read_point_cloud(scan)?;
        let (sem, inst) = read_labels(label, &class_cfg)?;
        cloud.attach_labels(sem, inst)?;
        Ok(cloud)
    };
    let frame_a = load(&args.frame_a, &args.labels_a)?;
    let frame_b = load(&args.frame_b, &args.labels_b)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let out = weighted_paste_drop(&frame_a, &frame_b, &stats, &params, &class_cfg, &mut rng);

    let out_dir = args.output_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let scan_path = out_dir.join("augmented.bin");
    let label_path = out_dir.join("augmented.label");
    write_point_cloud(&scan_path, &out)?;
    let result = PanopticResult::new(out.semantic.clone(), out.instance.clone())?;
    write_labels(&label_path, &result, &class_cfg)?;

    let render = if args.render {
        let geom = config.geometry.build()?;
        let img = build_range_image(&out, &geom);
        let mut labels = Array2::<u16>::zeros((geom.height, geom.width));
        for (v, u) in ndarray::indices((geom.height, geom.width)) {
            if let Some(i) = img.pixel_to_point[(v, u)] {
                labels[(v, u)] = out.semantic[i];
            }
        }
        let png_path = out_dir.join("augmented.png");
        render_range_image(&img, Some(labels.view()), &png_path)?;
        Some(png_path)
    } else {
        None
    };

    Ok(AugmentOutput {
        scan: scan_path,
        labels: label_path,
        render,
    })
}

// ----------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub output: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Debug, Serialize)]
pub struct SemanticClassReport {
    pub id: u16,
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct SemanticReport {
    pub miou: Option<f64>,
    pub per_class: Vec<SemanticClassReport>,
}

/// Pair prediction and ground-truth label files by filename; every file
/// must exist on both sides.
fn paired_label_files(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let names = |dir: &Path| -> Result<BTreeSet<String>> {
        Ok(sorted_files(dir, "label")?
            .into_iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect())
    };
    let pred_names = names(pred_dir)?;
    let gt_names = names(gt_dir)?;
    if pred_names.is_empty() && gt_names.is_empty() {
        return Err(Error::Pairing(format!(
            "no label files in {} or {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let missing_gt: Vec<&String> = pred_names.difference(&gt_names).collect();
    let missing_pred: Vec<&String> = gt_names.difference(&pred_names).collect();
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        return Err(Error::Pairing(format!(
            "unpaired label files; missing ground truth: {missing_gt:?}, missing predictions: {missing_pred:?}"
        )));
    }
    Ok(pred_names
        .iter()
        .map(|n| (pred_dir.join(n), gt_dir.join(n)))
        .collect())
}

pub fn cmd_eval_semantic(config: &PipelineConfig, args: &EvalArgs) -> Result<SemanticReport> {
    let class_cfg = load_class_config(&config.class_config)?;
    let pairs = paired_label_files(&args.pred_dir, &args.gt_dir)?;
    let pool = thread_pool(args.workers)?;
    let acc = pool.install(|| {
        pairs
            .par_iter()
            .map(|(pred, gt)| {
                let (pred_sem, _) = read_labels(pred, &class_cfg)?;
                let (gt_sem, _) = read_labels(gt, &class_cfg)?;
                if pred_sem.len() != gt_sem.len() {
                    return Err(Error::Pairing(format!(
                        "{}: {} points vs {} in ground truth",
                        pred.display(),
                        pred_sem.len(),
                        gt_sem.len()
                    )));
                }
                let mut acc = ConfusionAccumulator::new(&class_cfg);
                accumulate_semantic(&mut acc, &pred_sem, &gt_sem)?;
                Ok(acc)
            })
            .try_reduce(
                || ConfusionAccumulator::new(&class_cfg),
                |mut a, b| {
                    a.merge(&b);
                    Ok(a)
                },
            )
    })?;

    let (per_class, miou) = acc.miou();
    let report = SemanticReport {
        miou,
        per_class: class_cfg
            .class_ids()
            .map(|id| SemanticClassReport {
                id,
                name: class_cfg.name(id).to_string(),
                iou: per_class[id as usize],
            })
            .collect(),
    };
    for row in &report.per_class {
        match row.iou {
            Some(iou) => println!("{:<16} IoU {:.4}", row.name, iou),
            None => println!("{:<16} IoU --", row.name),
        }
    }
    match report.miou {
        Some(miou) => println!("mIoU {miou:.4}"),
        None => println!("mIoU undefined (no class present)"),
    }
    write_report(&report, args.output.as_deref())?;
    Ok(report)
}

pub fn cmd_eval_panoptic(
    config: &PipelineConfig,
    args: &EvalArgs,
) -> Result<crate::metrics::PanopticReport> {
    let class_cfg = load_class_config(&config.class_config)?;
    let pairs = paired_label_files(&args.pred_dir, &args.gt_dir)?;
    let pool = thread_pool(args.workers)?;
    let acc = pool.install(|| {
        pairs
            .par_iter()
            .map(|(pred, gt)| {
                let (pred_sem, pred_inst) = read_labels(pred, &class_cfg)?;
                let (gt_sem, gt_inst) = read_labels(gt, &class_cfg)?;
                if pred_sem.len() != gt_sem.len() {
                    return Err(Error::Pairing(format!(
                        "{}: {} points vs {} in ground truth",
                        pred.display(),
                        pred_sem.len(),
                        gt_sem.len()
                    )));
                }
                let pred = PanopticResult::new(pred_sem, pred_inst)?;
                let gt = PanopticResult::new(gt_sem, gt_inst)?;
                let mut acc = PanopticAccumulator::new(&class_cfg);
                accumulate_panoptic(&mut acc, &pred, &gt, &class_cfg)?;
                Ok(acc)
            })
            .try_reduce(
                || PanopticAccumulator::new(&class_cfg),
                |mut a, b| {
                    a.merge(&b);
                    Ok(a)
                },
            )
    })?;

    let report = panoptic_report(&acc, &class_cfg);
    println!(
        "{:<16} {:>7} {:>7} {:>7} {:>4} {:>4} {:>4}",
        "class", "PQ", "RQ", "SQ", "tp", "fp", "fn"
    );
    for row in &report.per_class {
        if row.present {
            println!(
                "{:<16} {:>7.4} {:>7.4} {:>7.4} {:>4} {:>4} {:>4}",
                row.name, row.pq, row.rq, row.sq, row.tp, row.fp, row.fn_
            );
        }
    }
    let fmt = |v: Option<f64>| v.map_or("--".to_string(), |x| format!("{x:.4}"));
    println!(
        "PQ {}  PQ_dagger {}  RQ {}  SQ {}",
        fmt(report.pq),
        fmt(report.pq_dagger),
        fmt(report.rq),
        fmt(report.sq)
    );
    println!(
        "things: PQ {} RQ {} SQ {}   stuff: PQ {} RQ {} SQ {}",
        fmt(report.pq_things),
        fmt(report.rq_things),
        fmt(report.sq_things),
        fmt(report.pq_stuff),
        fmt(report.rq_stuff),
        fmt(report.sq_stuff)
    );
    write_report(&report, args.output.as_deref())?;
    Ok(report)
}

fn write_report<T: Serialize>(report: &T, output: Option<&Path>) -> Result<()> {
    if let Some(path) = output {
        let text = toml::to_string_pretty(report).map_err(|e| Error::State(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ----------------------------------------------------------------------
// infer-merge
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InferArgs {
    /// Parameter container; created from the seed when `create_fixture`
    /// is set and the file does not exist yet.
    pub fixture: PathBuf,
    pub create_fixture: bool,
    /// Directory of `.bin` scans (processed in name order) or one file.
    pub scans: PathBuf,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub task: Option<Task>,
    pub disable_knn: bool,
}

pub fn cmd_infer_merge(config: &PipelineConfig, args: &InferArgs) -> Result<Vec<PathBuf>> {
    let class_cfg = load_class_config(&config.class_config)?;
    let head_cfg = config.head.build(class_cfg.num_classes())?;
    config.knn.validate()?;

    if !args.fixture.exists() {
        if args.create_fixture {
            random_fixture(&head_cfg, config.seed).write(&args.fixture)?;
        } else {
            return Err(Error::Fixture(format!(
                "fixture {} not found (pass --create-fixture to generate one)",
                args.fixture.display()
            )));
        }
    }
    let tensors = NamedTensors::read(&args.fixture)?;
    let params = HeadParams::from_tensors(&tensors, &head_cfg)?;

    let scans: Vec<PathBuf> = if args.scans.is_dir() {
        sorted_files(&args.scans, "bin")?
    } else {
        vec![args.scans.clone()]
    };
    if scans.is_empty() {
        return Err(Error::Dataset(format!(
            "no scan files under {}",
            args.scans.display()
        )));
    }

    let geom = config.geometry.build()?;
    let task = args.task.unwrap_or(config.inference.task);
    let thresholds = config.inference.thresholds();
    let knn = (!args.disable_knn).then_some(&config.knn);
    std::fs::create_dir_all(&args.output_dir).map_err(|e| Error::io(&args.output_dir, e))?;

    let pool = thread_pool(args.workers)?;

    // Phase 1: per-frame forward passes, order-preserving.
    let forwards = pool.install(|| {
        scans
            .par_iter()
            .map(|scan| {
                let cloud = read_point_cloud(scan)?;
                forward_frame(&cloud, &geom, &head_cfg, &params)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // Phase 2: temporal filtering over the class logits (sequential window
    // construction keeps results independent of the worker count).
    let (k_prev, l_next) = (config.temporal.k_prev, config.temporal.l_next);
    let filtered: Vec<Array2<f64>> = (0..forwards.len())
        .map(|t| {
            if k_prev == 0 && l_next == 0 {
                return Ok(forwards[t].outputs.class_logits.clone());
            }
            let mut window = TemporalWindow::new(k_prev, l_next);
            let lo = t.saturating_sub(k_prev);
            let hi = (t + l_next).min(forwards.len() - 1);
            for frame in &forwards[lo..=hi] {
                window.push(frame.outputs.class_logits.clone())?;
            }
            temporal_filter(&window)
        })
        .collect::<Result<Vec<_>>>()?;

    // Phase 3: merge, unproject, clean and write.
    let outputs = pool.install(|| {
        forwards
            .par_iter()
            .zip(filtered.par_iter())
            .zip(scans.par_iter())
            .map(|((forward, logits), scan)| {
                let (sem_map, inst_map) =
                    merge_to_maps(logits, forward, &class_cfg, task, &thresholds)?;
                let result = maps_to_points(&sem_map, &inst_map, &forward.image, knn)?;
                let stem = scan.file_stem().unwrap_or_default().to_os_string();
                let out_path = args.output_dir.join(&stem).with_extension("label");
                write_labels(&out_path, &result, &class_cfg)?;
                Ok(out_path)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(outputs)
}

// ----------------------------------------------------------------------
// postprocess
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PostprocessArgs {
    pub scans: PathBuf,
    pub labels: PathBuf,
    pub output_dir: PathBuf,
    pub workers: usize,
}

/// Re-clean existing per-point predictions with range-image KNN.
pub fn cmd_postprocess(config: &PipelineConfig, args: &PostprocessArgs) -> Result<Vec<PathBuf>> {
    let class_cfg = load_class_config(&config.class_config)?;
    config.knn.validate()?;
    let geom = config.geometry.build()?;
    let scans = sorted_files(&args.scans, "bin")?;
    if scans.is_empty() {
        return Err(Error::Dataset(format!(
            "no scan files under {}",
            args.scans.display()
        )));
    }
    std::fs::create_dir_all(&args.output_dir).map_err(|e| Error::io(&args.output_dir, e))?;

    let pool = thread_pool(args.workers)?;
    pool.install(|| {
        scans
            .par_iter()
            .map(|scan| {
                let stem = scan.file_stem().unwrap_or_default().to_os_string();
                let label_path = args.labels.join(&stem).with_extension("label");
                if !label_path.exists() {
                    return Err(Error::Pairing(format!(
                        "no label file for scan {}",
                        scan.display()
                    )));
                }
                let cloud = read_point_cloud(scan)?;
                let (sem, inst) = read_labels(&label_path, &class_cfg)?;
                if sem.len() != cloud.len() {
                    return Err(Error::Pairing(format!(
                        "{}: {} labels for {} points",
                        label_path.display(),
                        sem.len(),
                        cloud.len()
                    )));
                }
                let img = build_range_image(&cloud, &geom);
                let mut sem_map = Array2::<u16>::zeros((geom.height, geom.width));
                for (v, u) in ndarray::indices((geom.height, geom.width)) {
                    if let Some(i) = img.pixel_to_point[(v, u)] {
                        sem_map[(v, u)] = sem[i];
                    }
                }
                let cleaned = knn_clean(sem_map.view(), &img, &config.knn)?;
                let instance = cleaned
                    .iter()
                    .zip(&sem)
                    .zip(&inst)
                    .map(|((c, s), &i)| if c == s { i } else { 0 })
                    .collect();
                let result = PanopticResult::new(cleaned, instance)?;
                let out_path = args.output_dir.join(&stem).with_extension("label");
                write_labels(&out_path, &result, &class_cfg)?;
                Ok(out_path)
            })
            .collect::<Result<Vec<_>>>()
    })
}

// ----------------------------------------------------------------------
// loss-audit
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LossAuditArgs {
    pub trials: usize,
    /// Test hook: negate the focal gradient to prove the audit catches a
    /// broken gradient.
    pub mutate_focal_sign: bool,
}

const AUDIT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

pub fn cmd_loss_audit(config: &PipelineConfig, args: &LossAuditArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut failures = Vec::new();
    let channels = 3;

    let strategies = [
        ("none", BalanceStrategy::None),
        ("class", BalanceStrategy::Class),
        ("unified", BalanceStrategy::Unified),
    ];
    for (name, strategy) in strategies {
        let mut weights = LossWeights::uniform(channels);
        weights.alpha = vec![2.0, 9.0, 0.5];
        weights.beta = vec![4.0, 1.0, 1.0];
        weights.strategy = strategy;
        let mut max_err = 0.0f64;
        for _ in 0..args.trials {
            let (probs, targets) = fd_instance(channels, 6, 6, 0.1, &mut rng);
            let (_, mut grad) = weighted_focal_loss(probs.view(), targets.view(), &weights)?;
            if args.mutate_focal_sign {
                grad.mapv_inplace(|g| -g);
            }
            let fd = fd_grad3(
                |p| {
                    weighted_focal_loss(p.view(), targets.view(), &weights)
                        .map(|(l, _)| l)
                        .unwrap_or(f64::NAN)
                },
                &probs,
                FD_STEP,
            );
            max_err = max_err.max(relative_error(
                grad.as_slice().expect("contiguous"),
                fd.as_slice().expect("contiguous"),
            ));
        }
        report_audit_line(&format!("focal[{name}]"), max_err, &mut failures);
    }

    let mut max_err = 0.0f64;
    for _ in 0..args.trials {
        use rand::Rng;
        let weights = LossWeights::uniform(channels);
        let logits = Array2::from_shape_fn((5, channels + 1), |_| rng.gen_range(-2.0..2.0));
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..=channels)).collect();
        let (_, grad) = classification_loss(logits.view(), &targets, &weights)?;
        let fd = fd_grad2(
            |l| {
                classification_loss(l.view(), &targets, &weights)
                    .map(|(v, _)| v)
                    .unwrap_or(f64::NAN)
            },
            &logits,
            FD_STEP,
        );
        max_err = max_err.max(relative_error(
            grad.as_slice().expect("contiguous"),
            fd.as_slice().expect("contiguous"),
        ));
    }
    report_audit_line("classification", max_err, &mut failures);

    let mut max_err = 0.0f64;
    for _ in 0..args.trials {
        let (probs, targets) = fd_instance(channels, 6, 6, 0.1, &mut rng);
        let (_, grad) = lovasz_softmax(probs.view(), targets.view())?;
        let fd = fd_grad3(
            |p| {
                lovasz_softmax(p.view(), targets.view())
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            },
            &probs,
            FD_STEP,
        );
        max_err = max_err.max(relative_error(
            grad.as_slice().expect("contiguous"),
            fd.as_slice().expect("contiguous"),
        ));
    }
    report_audit_line("lovasz", max_err, &mut failures);

    let mut max_err = 0.0f64;
    for _ in 0..args.trials {
        let (probs, targets) = fd_instance(2, 5, 5, 0.0, &mut rng);
        let (_, grad) = boundary_loss(probs.view(), targets.view(), config.loss.boundary_theta)?;
        let fd = fd_grad3(
            |p| {
                boundary_loss(p.view(), targets.view(), config.loss.boundary_theta)
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            },
            &probs,
            FD_STEP,
        );
        max_err = max_err.max(relative_error(
            grad.as_slice().expect("contiguous"),
            fd.as_slice().expect("contiguous"),
        ));
    }
    report_audit_line("boundary", max_err, &mut failures);

    // Component values on one seeded fixture, mixed with the configured
    // lambdas.
    {
        use crate::loss::{total_loss, LossComponents};
        let weights = config.loss.build(channels)?;
        let (probs, targets) = fd_instance(channels, 6, 6, 0.0, &mut rng);
        use rand::Rng;
        let logits = Array2::from_shape_fn((4, channels + 1), |_| rng.gen_range(-2.0..2.0));
        let cls_targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..=channels)).collect();
        let components = LossComponents {
            classification: classification_loss(logits.view(), &cls_targets, &weights)?.0,
            focal: weighted_focal_loss(probs.view(), targets.view(), &weights)?.0,
            lovasz: lovasz_softmax(probs.view(), targets.view())?.0,
            boundary: boundary_loss(probs.view(), targets.view(), weights.boundary_theta)?.0,
        };
        let total = total_loss(&components, &weights)?;
        println!(
            "fixture components: classification {:.6} focal {:.6} lovasz {:.6} boundary {:.6} -> total {:.6}",
            components.classification,
            components.focal,
            components.lovasz,
            components.boundary,
            total
        );
    }

    // Reduction identity: focal with gamma = 0 and no balancing equals
    // plain cross-entropy.
    let (probs, targets) = fd_instance(channels, 6, 6, 0.0, &mut rng);
    let mut weights = LossWeights::uniform(channels);
    weights.gamma = 0.0;
    weights.strategy = BalanceStrategy::None;
    let (focal, _) = weighted_focal_loss(probs.view(), targets.view(), &weights)?;
    let mut ce = 0.0;
    let mut count = 0usize;
    for (idx, &t) in targets.indexed_iter() {
        if t != crate::loss::IGNORE_TARGET {
            ce += -probs[(t, idx.0, idx.1)].ln();
            count += 1;
        }
    }
    ce /= count as f64;
    let delta = (focal - ce).abs();
    println!(
        "focal(gamma=0, none) vs cross-entropy: |delta| = {delta:.3e} {}",
        if delta < 1e-10 { "PASS" } else { "FAIL" }
    );
    if delta >= 1e-10 {
        failures.push(format!("focal/CE reduction delta {delta:.3e}"));
    }

    if failures.is_empty() {
        println!("loss audit passed ({} trials per loss)", args.trials);
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient checks above {AUDIT_TOLERANCE:.0e}: {}",
            failures.join("; ")
        )))
    }
}

fn report_audit_line(name: &str, max_err: f64, failures: &mut Vec<String>) {
    let verdict = if max_err < AUDIT_TOLERANCE {
        "PASS"
    } else {
        "FAIL"
    };
    println!("{name:<22} max relative residual {max_err:.3e} {verdict}");
    if max_err >= AUDIT_TOLERANCE {
        failures.push(format!("{name} residual {max_err:.3e}"));
    }
}
