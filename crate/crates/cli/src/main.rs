use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lapt_core::checkpoint::{load_checkpoint, CheckpointStage};
use lapt_core::config::RunConfig;
use lapt_core::pipeline::{self, RunDir};
use lapt_core::{exec, Error, Exec};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

/// Lesion-aware post-training for conditional latent diffusion on
/// synthetic perfusion-to-diffusion phantoms.
#[derive(Parser, Debug)]
#[command(name = "lapt", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the phantom dataset into <out>/data.
    GeneratePhantom,
    /// Train the autoencoder on the train split.
    TrainAe,
    /// Train the base latent diffusion model.
    TrainLdm,
    /// Post-train a base model with the image and lesion losses.
    Posttrain,
    /// Synthesize targets for the evaluation split.
    Sample,
    /// Score predictions against ground truth.
    Evaluate,
    /// Post-train and evaluate over the λ grid.
    Ablate,
}

#[derive(Args, Debug)]
struct Opts {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Run directory holding data, checkpoints, predictions and reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Report path for `evaluate` and `ablate`.
    #[arg(long, global = true, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Overrides posttraining.weights.lambda_image.
    #[arg(long, global = true, value_name = "F", allow_negative_numbers = true)]
    lambda_image: Option<f64>,
    /// Overrides posttraining.weights.lambda_lesion.
    #[arg(long, global = true, value_name = "F", allow_negative_numbers = true)]
    lambda_lesion: Option<f64>,
    /// Dataset directory (default <out>/data).
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Input checkpoint (default depends on the subcommand).
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Prediction directory for `sample` and `evaluate`.
    #[arg(long, global = true, value_name = "DIR")]
    predictions: Option<PathBuf>,
}

fn load_config(opts: &Opts) -> lapt_core::Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(v) = opts.lambda_image {
        cfg.posttraining.weights.lambda_image = v;
    }
    if let Some(v) = opts.lambda_lesion {
        cfg.posttraining.weights.lambda_lesion = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_of(path: &Path) -> lapt_core::Result<CheckpointStage> {
    Ok(load_checkpoint(path)?.stage)
}

fn run(cmd: Command, opts: &Opts) -> lapt_core::Result<()> {
    let cfg = load_config(opts)?;
    let run = RunDir::new(&opts.out);
    let data = opts.data.clone().unwrap_or_else(|| run.data());
    let ex = Exec::Parallel;
    log::info!("config hash {} seed {}", cfg.hash(), cfg.seed);
    match cmd {
        Command::GeneratePhantom => {
            let m = pipeline::generate_dataset(&cfg, &data, ex)?;
            let counts: Vec<String> = m.splits.iter().map(|(k, v)| format!("{k}={}", v.len())).collect();
            println!("dataset written to {} ({})", data.display(), counts.join(", "));
        }
        Command::TrainAe => {
            pipeline::run_train_ae(&cfg, &run, &data, ex)?;
            println!("checkpoint written to {}", run.checkpoint(CheckpointStage::Autoencoder).display());
        }
        Command::TrainLdm => {
            let ae = opts
                .checkpoint
                .clone()
                .unwrap_or_else(|| run.checkpoint(CheckpointStage::Autoencoder));
            pipeline::run_train_ldm(&cfg, &run, &data, &ae, ex)?;
            println!("checkpoint written to {}", run.checkpoint(CheckpointStage::Base).display());
        }
        Command::Posttrain => {
            let base = opts.checkpoint.clone().unwrap_or_else(|| run.checkpoint(CheckpointStage::Base));
            pipeline::run_posttrain(&cfg, &run, &data, &base, ex)?;
            println!("checkpoint written to {}", run.checkpoint(CheckpointStage::Posttrain).display());
        }
        Command::Sample => {
            let ckpt = opts.checkpoint.clone().unwrap_or_else(|| run.latest_model());
            let preds = match &opts.predictions {
                Some(p) => p.clone(),
                None => run.predictions(stage_of(&ckpt)?),
            };
            let ids = pipeline::run_sample(&cfg, &data, &ckpt, &preds, ex)?;
            println!("{} predictions written to {}", ids.len(), preds.display());
        }
        Command::Evaluate => {
            let ckpt = opts.checkpoint.clone().unwrap_or_else(|| run.latest_model());
            let stage = stage_of(&ckpt)?;
            let preds = opts.predictions.clone().unwrap_or_else(|| run.predictions(stage));
            let out = opts.report.clone().unwrap_or_else(|| run.report(stage));
            let report = pipeline::run_evaluate(&cfg, &data, &ckpt, &preds, &out, ex)?;
            println!("report written to {}", out.display());
            for a in &report.aggregate {
                println!(
                    "{}: mae {:.5} lesion_mae {} psnr {} ms_ssim {:.4}",
                    a.modality,
                    a.mae,
                    a.lesion_mae.map_or("n/a".into(), |v| format!("{v:.5}")),
                    a.psnr.map_or("inf".into(), |v| format!("{v:.2}")),
                    a.ms_ssim
                );
            }
        }
        Command::Ablate => {
            let base = opts.checkpoint.clone().unwrap_or_else(|| run.checkpoint(CheckpointStage::Base));
            let out = opts.report.clone().unwrap_or_else(|| run.root.join("ablation.json"));
            let report = pipeline::run_ablate(&cfg, &run, &data, &base, &out, ex)?;
            println!(
                "{} rows written to {} and {}",
                report.rows.len(),
                out.display(),
                out.with_extension("csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = exec::init_from_env() {
        log::info!("worker threads capped at {n}");
    }
    match run(cli.command, &cli.opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            })
        }
    }
}
