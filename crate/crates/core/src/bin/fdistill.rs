//! Operator entry point. One subcommand per pipeline stage, all driven by
//! a single JSON config with dotted-path overrides. Exit codes: 0 success,
//! 1 validation error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use fdistill::checkpoint::{load_store, save_store};
use fdistill::config::ExperimentConfig;
use fdistill::dataset::{export_cache, CachePolicy};
use fdistill::harness::{
    finetune_segmentation, make_pipeline_data, make_stream_factory, pretrain_feature_distill,
    pretrain_mix_distill, run_ablation_sweep, StreamFactory, SweepAxis,
};
use fdistill::interpreter::{train_interpreter, TrainedInterpreter};
use fdistill::metrics::{EpochLoss, MetricsReport};
use fdistill::teacher::{train_teacher, DiffusionTeacher};
use fdistill::{Error, Result};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "fdistill", version, about = "Generative feature distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path override, repeatable: --set distill.lambda_at=0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides output_dir.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run directory name; defaults to "<stage>-seed<seed>".
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the diffusion teacher on the unlabeled split.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Train the feature interpreter on the labeled split.
    TrainInterpreter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Pretrain the student backbone against teacher features.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Required when distill.lambda_ld > 0.
        #[arg(long)]
        interpreter: Option<PathBuf>,
    },
    /// Finetune a segmentation head (optionally from a pretrained backbone).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Freeze the backbone and train the head only.
        #[arg(long)]
        freeze: bool,
    },
    /// Pretrain+finetune once per value of one ablation axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        interpreter: Option<PathBuf>,
        /// encode_mode | t_encode | loss_variant
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Write the encoded (or synthesized) feature stream to a cache file.
    ExportCache {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Attach interpreter soft labels to each record.
        #[arg(long)]
        interpreter: Option<PathBuf>,
        /// Cache path; defaults to <run dir>/features.dtfc.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished runs: markdown table plus loss-curve plots.
    Report {
        /// Directory containing run subdirectories.
        #[arg(long)]
        runs: PathBuf,
        /// Where to write summary.md and plots; defaults to --runs.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage or flag errors are validation failures.
            let _ = e.print();
            std::process::exit(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let mut sets: Vec<(String, String)> = Vec::with_capacity(common.set.len());
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set needs KEY=VALUE, got {pair}")))?;
        sets.push((k.to_string(), v.to_string()));
    }
    let mut cfg = base.with_overrides(&sets)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &common.output {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &ExperimentConfig, common: &Common, stage: &str) -> Result<PathBuf> {
    let id = common
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{stage}-seed{}", cfg.run.seed));
    let dir = Path::new(&cfg.output_dir).join(id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(dir)
}

/// metrics.json, losses.csv, and the wall-clock sidecar. Timing lives in
/// its own file so metrics.json stays bit-reproducible.
fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(dir.join("metrics.json"), report.to_json())?;
    std::fs::write(dir.join("losses.csv"), report.losses_csv())?;
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(
            &serde_json::json!({ "wall_clock_seconds": report.wall_clock_seconds }),
        )
        .expect("timing serializes"),
    )?;
    Ok(())
}

fn load_teacher(path: &Path) -> Result<Arc<DiffusionTeacher<f32>>> {
    Ok(Arc::new(DiffusionTeacher::<f32>::load(path)?))
}

fn load_interpreter(path: Option<&PathBuf>) -> Result<Option<Arc<TrainedInterpreter<f32>>>> {
    match path {
        Some(p) => Ok(Some(Arc::new(TrainedInterpreter::<f32>::load(p)?))),
        None => Ok(None),
    }
}

/// When the config asks for an offline cache, materialize epoch 0 once and
/// replay the file every epoch; online mode streams straight through.
fn cached_factory<'a>(
    cfg: &ExperimentConfig,
    mut inner: Box<StreamFactory<'a>>,
    dir: &Path,
) -> Result<Box<StreamFactory<'a>>> {
    if cfg.dataset.cache != CachePolicy::Offline {
        return Ok(inner);
    }
    let path = dir.join("features.dtfc");
    export_cache(inner(0)?, &path)?;
    Ok(Box::new(move |_| fdistill::dataset::load_cache(&path)))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainTeacher { common } => {
            let cfg = resolve_config(&common)?;
            let dir = run_dir(&cfg, &common, "teacher")?;
            let data = make_pipeline_data(&cfg.data)?;
            let (teacher, heldout) =
                train_teacher::<f32>(&data.unlabeled, &cfg.teacher, cfg.run.epochs, cfg.run.seed)?;
            teacher.save(&dir.join("teacher.dtck"))?;
            let mut report = MetricsReport::new(
                dir.file_name().unwrap().to_str().unwrap(),
                cfg.run.seed,
                serde_json::to_value(&cfg).expect("config serializes"),
            );
            for (epoch, mse) in heldout.iter().enumerate() {
                report.epoch_losses.push(EpochLoss {
                    epoch,
                    total: *mse,
                    mse: *mse,
                    at: 0.0,
                    ld: 0.0,
                });
            }
            write_report(&dir, &report)?;
            println!("teacher checkpoint: {}", dir.join("teacher.dtck").display());
            Ok(())
        }
        Cmd::TrainInterpreter { common, teacher } => {
            let cfg = resolve_config(&common)?;
            let dir = run_dir(&cfg, &common, "interpreter")?;
            let teacher = load_teacher(&teacher)?;
            let data = make_pipeline_data(&cfg.data)?;
            let mut icfg = cfg.interpreter.clone();
            icfg.num_classes = cfg.data.classes;
            let trained = train_interpreter(
                &teacher,
                &data.labeled_images,
                &data.labeled_masks,
                &icfg,
                &cfg.distill,
                cfg.run.epochs,
                cfg.run.seed,
            )?;
            trained.save(&dir.join("interpreter.dtck"))?;
            let mut report = MetricsReport::new(
                dir.file_name().unwrap().to_str().unwrap(),
                cfg.run.seed,
                serde_json::to_value(&cfg).expect("config serializes"),
            );
            report.final_metrics.miou = trained.miou_curve.last().copied();
            write_report(&dir, &report)?;
            println!(
                "interpreter checkpoint: {} (train mIoU {:.2})",
                dir.join("interpreter.dtck").display(),
                trained.miou_curve.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Cmd::Pretrain { common, teacher, interpreter } => {
            let cfg = resolve_config(&common)?;
            let dir = run_dir(&cfg, &common, "pretrain")?;
            let teacher = load_teacher(&teacher)?;
            let interpreter = load_interpreter(interpreter.as_ref())?;
            let data = make_pipeline_data(&cfg.data)?;
            let base = make_stream_factory(&cfg, &teacher, interpreter.as_ref(), &data)?;
            let mut streams = cached_factory(&cfg, base, &dir)?;
            let run_id = dir.file_name().unwrap().to_str().unwrap().to_string();
            let outcome = if cfg.distill.lambda_ld > 0.0 {
                pretrain_mix_distill::<f32>(
                    &cfg.backbone,
                    &cfg.regressor,
                    cfg.data.classes,
                    &mut *streams,
                    cfg.data.n_unlabeled,
                    &cfg.distill,
                    &cfg.run,
                    &run_id,
                )?
            } else {
                pretrain_feature_distill::<f32>(
                    &cfg.backbone,
                    &cfg.regressor,
                    &mut *streams,
                    cfg.data.n_unlabeled,
                    &cfg.distill,
                    &cfg.run,
                    &run_id,
                )?
            };
            let meta = serde_json::to_value(&cfg).expect("config serializes");
            save_store(&dir.join("checkpoint.dtck"), &meta, &outcome.store)?;
            save_store(
                &dir.join("backbone.dtck"),
                &meta,
                &outcome.store.subset("backbone"),
            )?;
            write_report(&dir, &outcome.report)?;
            println!("backbone checkpoint: {}", dir.join("backbone.dtck").display());
            Ok(())
        }
        Cmd::Finetune { common, backbone, freeze } => {
            let cfg = resolve_config(&common)?;
            let dir = run_dir(&cfg, &common, "finetune")?;
            let data = make_pipeline_data(&cfg.data)?;
            let pretrained = match &backbone {
                Some(path) => Some(load_store::<f32>(path)?.1),
                None => None,
            };
            let run_id = dir.file_name().unwrap().to_str().unwrap().to_string();
            let outcome = finetune_segmentation::<f32>(
                pretrained.as_ref(),
                &cfg.backbone,
                &data.labeled_images,
                &data.labeled_masks,
                &data.eval_images,
                &data.eval_masks,
                cfg.data.classes,
                &cfg.distill,
                &cfg.run,
                freeze,
                &run_id,
            )?;
            let meta = serde_json::to_value(&cfg).expect("config serializes");
            save_store(&dir.join("segmentation.dtck"), &meta, &outcome.store)?;
            write_report(&dir, &outcome.report)?;
            println!(
                "mIoU {:.2}, pixel acc {:.2}",
                outcome.report.final_metrics.miou.unwrap_or(f64::NAN),
                outcome.report.final_metrics.pixel_accuracy.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Cmd::Sweep { common, teacher, interpreter, axis, values } => {
            let cfg = resolve_config(&common)?;
            let dir = run_dir(&cfg, &common, "sweep")?;
            let teacher = load_teacher(&teacher)?;
            let interpreter = load_interpreter(interpreter.as_ref())?;
            let data = make_pipeline_data(&cfg.data)?;
            let axis: SweepAxis = axis.parse()?;
            let outcome =
                run_ablation_sweep(axis, &values, &cfg, &teacher, interpreter.as_ref(), &data)?;
            for row in &outcome.rows {
                let row_dir = dir.join(format!("row-{}", row.value));
                std::fs::create_dir_all(&row_dir)?;
                std::fs::write(row_dir.join("metrics.json"), row.finetune.to_json())?;
                std::fs::write(row_dir.join("pretrain-metrics.json"), row.pretrain.to_json())?;
                std::fs::write(row_dir.join("losses.csv"), row.pretrain.losses_csv())?;
            }
            let table = outcome.markdown_table();
            std::fs::write(dir.join("table.md"), &table)?;
            print!("{table}");
            Ok(())
        }
        Cmd::ExportCache { common, teacher, interpreter, out } => {
            let mut cfg = resolve_config(&common)?;
            let dir = run_dir(&cfg, &common, "cache")?;
            let teacher = load_teacher(&teacher)?;
            let interpreter = load_interpreter(interpreter.as_ref())?;
            if interpreter.is_none() {
                // Raw feature export: soft labels only ride along when an
                // interpreter is supplied.
                cfg.distill.lambda_ld = 0.0;
            }
            let data = make_pipeline_data(&cfg.data)?;
            let mut streams = make_stream_factory(&cfg, &teacher, interpreter.as_ref(), &data)?;
            let path = out.unwrap_or_else(|| dir.join("features.dtfc"));
            let count = export_cache(streams(0)?, &path)?;
            let bytes = std::fs::metadata(&path)?.len();
            println!("wrote {count} records ({bytes} bytes) to {}", path.display());
            Ok(())
        }
        Cmd::Report { runs, output } => {
            let out = output.unwrap_or_else(|| runs.clone());
            let md = fdistill::report::generate_report(&runs, &out)?;
            print!("{md}");
            Ok(())
        }
    }
}
