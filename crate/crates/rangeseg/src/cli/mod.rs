//! Batch command-line surface wiring the library into reproducible
//! pipeline runs. One seeded generator drives all randomness; every
//! command is deterministic under a fixed seed and fixture.

mod commands;
mod config;
mod pipeline;
mod render;

pub use commands::{
    cmd_augment, cmd_eval_panoptic, cmd_eval_semantic, cmd_infer_merge, cmd_loss_audit,
    cmd_postprocess, cmd_stats, AugmentArgs, EvalArgs, InferArgs, LossAuditArgs, PostprocessArgs,
    StatsArgs,
};
pub use config::{require_exists, PipelineConfig, DATA_ROOT_ENV};
pub use pipeline::{
    forward_frame, input_channels, maps_to_points, merge_to_maps, stand_in_pyramid, FrameForward,
};
pub use render::{class_color, render_range_image};

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::stats::Task;

#[derive(Debug, Parser)]
#[command(
    name = "rangeseg",
    about = "Range-view LiDAR segmentation toolkit: statistics, augmentation, inference merging, post-processing and evaluation"
)]
struct Cli {
    /// Pipeline configuration document (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Class configuration override.
    #[arg(long, global = true)]
    class_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "semantic" => Ok(Task::Semantic),
        "panoptic" => Ok(Task::Panoptic),
        other => Err(format!("unknown task {other:?} (semantic|panoptic)")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan the training split and write per-class statistics and
    /// re-balance weights.
    Stats {
        /// Destination of the stats document (default: configured path).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Use a published-proportions fixture instead of scanning scans.
        #[arg(long)]
        published: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Weighted paste/drop augmentation of one frame pair.
    Augment {
        #[arg(long)]
        frame_a: PathBuf,
        #[arg(long)]
        labels_a: PathBuf,
        #[arg(long)]
        frame_b: PathBuf,
        #[arg(long)]
        labels_b: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Also write a class-colored range-image render.
        #[arg(long)]
        render: bool,
        /// Long-tail threshold override.
        #[arg(long)]
        threshold: Option<f64>,
        /// paste-drop | paste-only | drop-only
        #[arg(long)]
        mode: Option<String>,
        /// semantic | panoptic weight row for paste/drop probabilities.
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
    },
    /// Semantic evaluation (mIoU) of predicted label files against ground
    /// truth, paired by filename.
    EvalSem {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Panoptic evaluation (PQ family) of predicted label files.
    EvalPan {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the fixture-weight inference pipeline over scans and write
    /// predicted label files.
    InferMerge {
        /// Named-tensor parameter container.
        #[arg(long)]
        fixture: PathBuf,
        /// Generate a random fixture from the seed when missing.
        #[arg(long)]
        create_fixture: bool,
        /// Scan directory (or a single .bin file).
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        /// Skip the KNN cleaning stage.
        #[arg(long)]
        no_knn: bool,
        /// Past frames in the temporal window.
        #[arg(long)]
        temporal_k: Option<usize>,
        /// Future frames in the temporal window (0 keeps it causal).
        #[arg(long)]
        temporal_l: Option<usize>,
        #[arg(long)]
        knn_k: Option<usize>,
        #[arg(long)]
        knn_window: Option<usize>,
        #[arg(long)]
        knn_sigma: Option<f64>,
        #[arg(long)]
        knn_cutoff: Option<f64>,
    },
    /// KNN-clean existing per-point label files against their scans.
    Postprocess {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        knn_k: Option<usize>,
        #[arg(long)]
        knn_window: Option<usize>,
        #[arg(long)]
        knn_sigma: Option<f64>,
        #[arg(long)]
        knn_cutoff: Option<f64>,
    },
    /// Finite-difference verification of every loss gradient.
    LossAudit {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Negate the focal gradient to prove the audit detects breakage.
        #[arg(long, hide = true)]
        mutate_focal_sign: bool,
    },
}

fn apply_knn_overrides(
    cfg: &mut PipelineConfig,
    k: Option<usize>,
    window: Option<usize>,
    sigma: Option<f64>,
    cutoff: Option<f64>,
) {
    if let Some(k) = k {
        cfg.knn.k = k;
    }
    if let Some(w) = window {
        cfg.knn.window = w;
    }
    if let Some(s) = sigma {
        cfg.knn.sigma = s;
    }
    if let Some(c) = cutoff {
        cfg.knn.cutoff = c;
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(class_config) = cli.class_config {
        config.class_config = class_config;
    }

    match cli.command {
        Command::Stats {
            output,
            published,
            workers,
        } => {
            cmd_stats(
                &config,
                &StatsArgs {
                    output,
                    published,
                    workers,
                },
            )?;
        }
        Command::Augment {
            frame_a,
            labels_a,
            frame_b,
            labels_b,
            output_dir,
            render,
            threshold,
            mode,
            task,
        } => {
            if let Some(t) = threshold {
                config.augment.threshold = t;
            }
            if let Some(task) = task {
                config.augment.task = task;
            }
            if let Some(mode) = mode {
                config.augment.mode = match mode.as_str() {
                    "paste-drop" => crate::augment::PasteDropMode::PasteDrop,
                    "paste-only" => crate::augment::PasteDropMode::PasteOnly,
                    "drop-only" => crate::augment::PasteDropMode::DropOnly,
                    other => {
                        return Err(Error::ConfigValidation(format!(
                            "unknown mode {other:?} (paste-drop|paste-only|drop-only)"
                        )))
                    }
                };
            }
            let out = cmd_augment(
                &config,
                &AugmentArgs {
                    frame_a,
                    labels_a,
                    frame_b,
                    labels_b,
                    output_dir,
                    render,
                },
            )?;
            println!("wrote {}", out.scan.display());
            println!("wrote {}", out.labels.display());
            if let Some(png) = out.render {
                println!("wrote {}", png.display());
            }
        }
        Command::EvalSem {
            pred,
            gt,
            output,
            workers,
        } => {
            cmd_eval_semantic(
                &config,
                &EvalArgs {
                    pred_dir: pred,
                    gt_dir: gt,
                    output,
                    workers,
                },
            )?;
        }
        Command::EvalPan {
            pred,
            gt,
            output,
            workers,
        } => {
            cmd_eval_panoptic(
                &config,
                &EvalArgs {
                    pred_dir: pred,
                    gt_dir: gt,
                    output,
                    workers,
                },
            )?;
        }
        Command::InferMerge {
            fixture,
            create_fixture,
            scans,
            output,
            workers,
            task,
            no_knn,
            temporal_k,
            temporal_l,
            knn_k,
            knn_window,
            knn_sigma,
            knn_cutoff,
        } => {
            if let Some(k) = temporal_k {
                config.temporal.k_prev = k;
            }
            if let Some(l) = temporal_l {
                config.temporal.l_next = l;
            }
            apply_knn_overrides(&mut config, knn_k, knn_window, knn_sigma, knn_cutoff);
            let outputs = cmd_infer_merge(
                &config,
                &InferArgs {
                    fixture,
                    create_fixture,
                    scans,
                    output_dir: output,
                    workers,
                    task,
                    disable_knn: no_knn,
                },
            )?;
            println!("wrote {} label files", outputs.len());
        }
        Command::Postprocess {
            scans,
            labels,
            output,
            workers,
            knn_k,
            knn_window,
            knn_sigma,
            knn_cutoff,
        } => {
            apply_knn_overrides(&mut config, knn_k, knn_window, knn_sigma, knn_cutoff);
            let outputs = cmd_postprocess(
                &config,
                &PostprocessArgs {
                    scans,
                    labels,
                    output_dir: output,
                    workers,
                },
            )?;
            println!("wrote {} label files", outputs.len());
        }
        Command::LossAudit {
            trials,
            mutate_focal_sign,
        } => {
            cmd_loss_audit(
                &config,
                &LossAuditArgs {
                    trials,
                    mutate_focal_sign,
                },
            )?;
        }
    }
    Ok(())
}

/// Parse arguments, run the selected command, and map errors onto the
/// documented exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
