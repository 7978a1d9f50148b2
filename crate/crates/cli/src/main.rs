use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use crowd_hat::compress::dump_features;
use crowd_hat::config::PipelineConfig;
use crowd_hat::metrics::{eval_localization_qnrf, DistanceThreshold, MatchCriterion};
use crowd_hat::net::{
    init_output_priors, load_model, save_model, train, write_loss_curve, HatModel,
};
use crowd_hat::pipeline::{
    build_samples, compress_all, evaluate, format_table, infer_all, load_sample_dir, point_pairs,
    run_pipeline, save_feature_dir, save_sample_dir, write_metrics_csv, MetricRow, ScenePrediction,
};
use crowd_hat::scene::{read_jsonl, write_jsonl};
use crowd_hat::synth::generate_dataset;
use crowd_hat::{load_scenes, save_scenes, DetectorOutput, SceneRecord};

#[derive(Parser)]
#[command(
    name = "crowd-hat",
    version,
    about = "Crowd detection post-processing toolkit"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Starting point for the configuration before the file is applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,

    /// Override a config value, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size network and training schedule.
    Default,
    /// Small network that trains on one CPU core in minutes.
    Benchmark,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with simulated detector output.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compress detector output into per-scene feature files.
    Compress {
        #[arg(short, long)]
        scenes: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Search per-region NMS thresholds and write training samples.
    Search {
        #[arg(short, long)]
        scenes: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a model on a directory of training samples.
    Train {
        #[arg(long)]
        samples: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Predict final boxes and counts. Ground-truth points in the input are ignored.
    Infer {
        #[arg(short, long)]
        scenes: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(short, long)]
        predictions: PathBuf,
        #[arg(short, long)]
        truth: PathBuf,
        /// Write the metrics table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Method name used in the table.
        #[arg(long, default_value = "predictions")]
        method: String,
        /// Match centers within this many pixels.
        #[arg(long, conflicts_with_all = ["side_factor", "iou"])]
        sigma: Option<f64>,
        /// Match centers within this multiple of the pseudo-box side.
        #[arg(long, conflicts_with = "iou")]
        side_factor: Option<f64>,
        /// Match by box overlap at this IoU.
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Run every stage end to end in the configured workspace.
    Pipeline {
        /// Workspace directory; overrides `paths.workspace`.
        #[arg(short, long)]
        workspace: Option<PathBuf>,
    },
    /// Write one scene's compressed features as CSV grids.
    DumpFeatures {
        #[arg(short, long)]
        scenes: PathBuf,
        /// Scene id; defaults to the first scene.
        #[arg(long)]
        id: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match cli.preset {
        Preset::Default => PipelineConfig::default(),
        Preset::Benchmark => PipelineConfig::benchmark(),
    };
    PipelineConfig::load_over(&base, cli.config.as_deref(), &cli.overrides)
        .context("loading configuration")
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out } => {
            let scenes = generate_dataset(&cfg.synth).context("[synth] generating scenes")?;
            ensure_parent(&out)?;
            save_scenes(&scenes, &out).context("[synth] writing scenes")?;
            log::info!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Compress { scenes, out } => {
            let views: Vec<DetectorOutput> =
                read_jsonl(&scenes).context("[compress] reading scenes")?;
            let features = compress_all(&views, &cfg.compression).context("[compress]")?;
            let ids: Vec<&str> = views.iter().map(|s| s.id.as_str()).collect();
            save_feature_dir(&ids, &features, &out).context("[compress] writing features")?;
            log::info!(
                "wrote {} feature files to {}",
                features.len(),
                out.display()
            );
        }
        Command::Search { scenes, out } => {
            let scenes = load_scenes(&scenes).context("[search] reading scenes")?;
            let views: Vec<DetectorOutput> =
                scenes.iter().map(SceneRecord::detector_view).collect();
            let features =
                compress_all(&views, &cfg.compression).context("[search] compressing")?;
            let samples = build_samples(&scenes, &features, &cfg.nms).context("[search]")?;
            save_sample_dir(&samples, &out).context("[search] writing samples")?;
            log::info!(
                "wrote {} training samples to {}",
                samples.len(),
                out.display()
            );
        }
        Command::Train {
            samples,
            model,
            loss_curve,
        } => {
            let data = load_sample_dir(&samples).context("[train] reading samples")?;
            if data.is_empty() {
                bail!("[train] empty dataset in {}", samples.display());
            }
            let mut net = HatModel::new(cfg.arch.clone(), cfg.train.seed).context("[train]")?;
            init_output_priors(&mut net, &data);
            let curve = train(&mut net, &data, &cfg.train).context("[train]")?;
            ensure_parent(&model)?;
            save_model(&net, &model).context("[train] writing model")?;
            if let Some(p) = loss_curve {
                ensure_parent(&p)?;
                write_loss_curve(&curve, &p).context("[train] writing loss curve")?;
            }
            if let (Some(a), Some(b)) = (curve.first(), curve.last()) {
                log::info!(
                    "loss {:.5} -> {:.5} over {} epochs",
                    a.total,
                    b.total,
                    curve.len()
                );
            }
        }
        Command::Infer { scenes, model, out } => {
            let views: Vec<DetectorOutput> =
                read_jsonl(&scenes).context("[infer] reading scenes")?;
            let net = load_model(&model).context("[infer] reading model")?;
            let preds =
                infer_all(&net, &views, &cfg.compression, cfg.nms.conf_floor).context("[infer]")?;
            ensure_parent(&out)?;
            write_jsonl(&preds, &out).context("[infer] writing predictions")?;
            log::info!(
                "wrote predictions for {} scenes to {}",
                preds.len(),
                out.display()
            );
        }
        Command::Eval {
            predictions,
            truth,
            csv,
            method,
            sigma,
            side_factor,
            iou,
        } => {
            if let Some(s) = sigma {
                cfg.eval.criterion = MatchCriterion::pixels(s);
            }
            if let Some(f) = side_factor {
                cfg.eval.criterion = MatchCriterion::Distance {
                    sigma: DistanceThreshold::PseudoSide(f),
                };
            }
            if let Some(t) = iou {
                cfg.eval.criterion = MatchCriterion::Box { iou_thresh: t };
            }
            cfg.eval.criterion.validate().context("[eval]")?;
            let preds: Vec<ScenePrediction> =
                read_jsonl(&predictions).context("[eval] reading predictions")?;
            let gts = load_scenes(&truth).context("[eval] reading ground truth")?;
            let report = evaluate(&preds, &gts, &cfg.eval).context("[eval]")?;
            let mut rows = report.rows(&method, "all");
            let by_id: std::collections::HashMap<&str, &SceneRecord> =
                gts.iter().map(|g| (g.id.as_str(), g)).collect();
            let ordered: Vec<SceneRecord> =
                preds.iter().map(|p| by_id[p.id.as_str()].clone()).collect();
            let sweep = eval_localization_qnrf(&point_pairs(&preds, &ordered));
            rows.push(MetricRow::new(
                &method,
                "precision_1_100px",
                "all",
                sweep.precision,
            ));
            rows.push(MetricRow::new(
                &method,
                "recall_1_100px",
                "all",
                sweep.recall,
            ));
            rows.push(MetricRow::new(&method, "f1_1_100px", "all", sweep.f1));
            print!("{}", format_table(&rows));
            if let Some(p) = csv {
                ensure_parent(&p)?;
                write_metrics_csv(&rows, &p).context("[eval] writing csv")?;
            }
        }
        Command::Pipeline { workspace } => {
            if let Some(ws) = workspace {
                cfg.paths.workspace = ws;
            }
            let summary = run_pipeline(&cfg)?;
            print!("{summary}");
        }
        Command::DumpFeatures { scenes, id, out } => {
            let views: Vec<DetectorOutput> =
                read_jsonl(&scenes).context("[dump-features] reading scenes")?;
            let scene = match &id {
                Some(id) => views.iter().find(|s| &s.id == id),
                None => views.first(),
            }
            .with_context(|| {
                format!(
                    "[dump-features] no scene {}",
                    id.as_deref().unwrap_or("in file")
                )
            })?;
            let f = crowd_hat::compress::compress_scene(scene, &cfg.compression)
                .context("[dump-features]")?;
            dump_features(&f, &out).context("[dump-features] writing")?;
            log::info!("dumped `{}` to {}", scene.id, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
