//! End-to-end stages: dataset generation, autoencoder and diffusion
//! training, post-training, sampling, evaluation and the λ ablation.
//!
//! Each stage has an in-memory form and a file-based form working inside
//! one run directory (see [`RunDir`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder, AeLogRecord, Autoencoder, DOWNSAMPLE_FACTOR};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointStage, DiffusionState};
use crate::config::RunConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{arg_err, Error, Result};
use crate::exec::Exec;
use crate::grid::ImageSlice;
use crate::metrics::{self, evaluate_cases, EncoderFeatures, EvalCase, MetricsReport, Provenance};
use crate::objectives::LossWeights;
use crate::phantom::{self, BuildOptions, DatasetManifest, PhantomCase};
use crate::rng::{self, tag};
use crate::train::{self, prepare_items, Ddpm, TrainConfig, TrainLogRecord, TrainRun};

/// File layout of a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, stage: CheckpointStage) -> PathBuf {
        self.root.join(format!("{}.ckpt", stage_name(stage)))
    }

    pub fn log(&self, stage: CheckpointStage) -> PathBuf {
        self.root.join(format!("{}_log.jsonl", stage_name(stage)))
    }

    pub fn predictions(&self, stage: CheckpointStage) -> PathBuf {
        self.root.join("predictions").join(stage_name(stage))
    }

    pub fn report(&self, stage: CheckpointStage) -> PathBuf {
        self.root.join(format!("report_{}.json", stage_name(stage)))
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }

    /// The latest diffusion checkpoint present: post-trained, else base.
    pub fn latest_model(&self) -> PathBuf {
        let post = self.checkpoint(CheckpointStage::Posttrain);
        if post.exists() {
            post
        } else {
            self.checkpoint(CheckpointStage::Base)
        }
    }
}

pub fn stage_name(stage: CheckpointStage) -> &'static str {
    match stage {
        CheckpointStage::Autoencoder => "autoencoder",
        CheckpointStage::Base => "base",
        CheckpointStage::Posttrain => "posttrain",
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn new_checkpoint(cfg: &RunConfig, stage: CheckpointStage, autoencoder: Autoencoder) -> Checkpoint {
    Checkpoint {
        stage,
        seed: cfg.seed,
        config: cfg.to_value(),
        config_hash: cfg.hash(),
        autoencoder,
        diffusion: None,
        log: None,
    }
}

fn provenance(ckpt: &Checkpoint) -> Provenance {
    Provenance {
        seed: ckpt.seed,
        config_hash: ckpt.config_hash.clone(),
    }
}

fn diffusion_state(ckpt: &Checkpoint) -> Result<&DiffusionState> {
    ckpt.diffusion
        .as_ref()
        .ok_or_else(|| arg_err!("{} checkpoint has no diffusion model", stage_name(ckpt.stage)))
}

/// Generates the phantom dataset described by `cfg.data` into `out_dir`.
pub fn generate_dataset(cfg: &RunConfig, out_dir: &Path, exec: Exec) -> Result<DatasetManifest> {
    let opts = BuildOptions {
        split_prevalence: cfg.data.split_prevalence.clone(),
        config_hash: Some(cfg.hash()),
        exec,
    };
    phantom::build_dataset(cfg.data.n_cases, cfg.split_ratios(), cfg.seed, out_dir, &cfg.data.phantom, &opts)
}

/// Trains the autoencoder on the targets of `cases`.
pub fn autoencoder_stage(cfg: &RunConfig, cases: &[PhantomCase], exec: Exec) -> Result<(Checkpoint, Vec<AeLogRecord>)> {
    let images: Vec<ImageSlice> = cases.iter().map(|c| c.target.clone()).collect();
    let trained = train_autoencoder(&images, &cfg.autoencoder, cfg.seed, exec)?;
    Ok((new_checkpoint(cfg, CheckpointStage::Autoencoder, trained.model), trained.log))
}

/// Base diffusion training on top of a trained autoencoder.
pub fn base_stage(cfg: &RunConfig, cases: &[PhantomCase], ae: &Checkpoint, exec: Exec) -> Result<(Checkpoint, Vec<TrainLogRecord>)> {
    let schedule = cfg.diffusion.schedule.build()?;
    let items = prepare_items(cases, &ae.autoencoder, exec)?;
    let denoiser = Denoiser::init(&cfg.denoiser, rng::mix(&[cfg.seed, tag::INIT]))?;
    let mut run = TrainRun::new(denoiser, cfg.training.optimizer);
    let process = Ddpm { schedule };
    let log = train::train_base(&items, &ae.autoencoder, &mut run, &cfg.training, &process, cfg.seed, exec)?;
    let mut ckpt = new_checkpoint(cfg, CheckpointStage::Base, ae.autoencoder.clone());
    ckpt.diffusion = Some(DiffusionState {
        schedule: cfg.diffusion.schedule.clone(),
        run,
    });
    Ok((ckpt, log))
}

/// Post-training continuing from a base checkpoint with `post` (whose
/// weights may differ from the config's). The schedule is the base model's.
pub fn posttrain_stage(
    cfg: &RunConfig,
    post: &TrainConfig,
    cases: &[PhantomCase],
    base: &Checkpoint,
    exec: Exec,
) -> Result<(Checkpoint, Vec<TrainLogRecord>)> {
    let state = diffusion_state(base)?;
    let schedule = state.schedule.build()?;
    let mut ae = base.autoencoder.clone();
    let items = prepare_items(cases, &ae, exec)?;
    let mut run = state.run.clone();
    let process = Ddpm { schedule };
    let log = train::posttrain(&items, &mut ae, &mut run, post, &process, cfg.seed, exec)?;
    let mut effective = cfg.clone();
    effective.posttraining = post.clone();
    let mut ckpt = new_checkpoint(&effective, CheckpointStage::Posttrain, ae);
    ckpt.diffusion = Some(DiffusionState {
        schedule: state.schedule.clone(),
        run,
    });
    Ok((ckpt, log))
}

/// DDIM sampling settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSettings {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl SampleSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.diffusion.sampling_steps,
            eta: cfg.diffusion.eta,
            seed: cfg.seed,
        }
    }
}

/// Synthesizes one target per case from its source. Case `i` draws its
/// noise from a stream keyed by (seed, i).
pub fn sample_cases(ckpt: &Checkpoint, cases: &[PhantomCase], settings: SampleSettings, exec: Exec) -> Result<Vec<ImageSlice>> {
    let state = diffusion_state(ckpt)?;
    let schedule: NoiseSchedule = state.schedule.build()?;
    let den = &state.run.denoiser;
    let ae = &ckpt.autoencoder;
    let shape = (ae.latent_channels(), 0, 0);
    let out = exec.map_range(cases.len(), |i| -> Result<ImageSlice> {
        let case = &cases[i];
        let (h, w) = (case.source.h / DOWNSAMPLE_FACTOR, case.source.w / DOWNSAMPLE_FACTOR);
        let cond = den.rescale_condition(&case.source, (h, w))?;
        let z = diffusion::sample(
            |z, t, c| den.predict_eps(z, t, c),
            &cond,
            &schedule,
            (shape.0, h, w),
            settings.steps,
            settings.eta,
            rng::mix(&[settings.seed, tag::SAMPLE, i as u64]),
        )?;
        ae.decode(&z)
    });
    out.into_iter().collect()
}

/// Scores predictions against their cases; features come from the
/// checkpoint's encoder.
pub fn evaluate_predictions(ckpt: &Checkpoint, cases: &[PhantomCase], predictions: Vec<ImageSlice>, exec: Exec) -> Result<MetricsReport> {
    if cases.len() != predictions.len() {
        return Err(arg_err!("{} cases but {} predictions", cases.len(), predictions.len()));
    }
    let eval: Vec<EvalCase> = cases
        .iter()
        .zip(predictions)
        .map(|(c, p)| EvalCase {
            case_id: c.case_id.clone(),
            target: c.target.clone(),
            mask: c.mask.clone(),
            prediction: p,
        })
        .collect();
    let mut report = evaluate_cases(&eval, &EncoderFeatures { ae: &ckpt.autoencoder }, exec)?;
    report.seed = Some(ckpt.seed);
    report.config_hash = Some(ckpt.config_hash.clone());
    Ok(report)
}

/// One λ point of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub lambda_image: f64,
    pub lambda_lesion: f64,
    /// False for (0, 0), which is the base checkpoint itself.
    pub posttrained: bool,
    pub metrics: Vec<AblationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMetrics {
    pub modality: String,
    pub mae: f64,
    pub lesion_mae: Option<f64>,
    pub psnr: Option<f64>,
    pub ms_ssim: f64,
    pub frechet_feature_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub seed: u64,
    pub config_hash: String,
    pub base_step: u64,
    pub split: String,
    pub case_count: usize,
    pub lesion_case_count: usize,
    /// Sorted by (λ_image, λ_lesion).
    pub rows: Vec<AblationRow>,
}

impl AblationRow {
    pub fn from_report(weights: LossWeights, posttrained: bool, report: &MetricsReport) -> Self {
        let metrics = report
            .aggregate
            .iter()
            .zip(&report.frechet)
            .map(|(a, f)| AblationMetrics {
                modality: a.modality.clone(),
                mae: a.mae,
                lesion_mae: a.lesion_mae,
                psnr: a.psnr,
                ms_ssim: a.ms_ssim,
                frechet_feature_distance: f.frechet_feature_distance,
            })
            .collect();
        Self {
            lambda_image: weights.lambda_image,
            lambda_lesion: weights.lambda_lesion,
            posttrained,
            metrics,
        }
    }
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["lambda_image".to_string(), "lambda_lesion".into(), "posttrained".into()];
        if let Some(row) = self.rows.first() {
            for m in &row.metrics {
                for col in ["mae", "lesion_mae", "psnr", "ms_ssim", "frechet_feature_distance"] {
                    header.push(format!("{}_{col}", m.modality));
                }
            }
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.lambda_image.to_string(), r.lambda_lesion.to_string(), r.posttrained.to_string()];
            for m in &r.metrics {
                rec.extend([
                    m.mae.to_string(),
                    fmt(m.lesion_mae),
                    fmt(m.psnr),
                    m.ms_ssim.to_string(),
                    m.frechet_feature_distance.to_string(),
                ]);
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Sorted, de-duplicated grid.
pub fn sorted_grid(grid: &[LossWeights]) -> Result<Vec<LossWeights>> {
    if grid.is_empty() {
        return Err(Error::config("evaluation.ablation_grid", "grid is empty"));
    }
    for (i, w) in grid.iter().enumerate() {
        w.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("evaluation.ablation_grid[{i}].{field}"), message),
            other => other,
        })?;
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| {
        a.lambda_image
            .total_cmp(&b.lambda_image)
            .then(a.lambda_lesion.total_cmp(&b.lambda_lesion))
    });
    g.dedup();
    Ok(g)
}

/// Evaluation of one grid point: the checkpoint and its metrics.
pub struct AblationPoint {
    pub weights: LossWeights,
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
    pub predictions: Vec<ImageSlice>,
    pub report: MetricsReport,
}

/// Post-trains from `base` at `weights` (or reuses `base` for (0, 0)),
/// samples `eval_cases` and scores them.
pub fn ablation_point(
    cfg: &RunConfig,
    weights: LossWeights,
    train_cases: &[PhantomCase],
    eval_cases: &[PhantomCase],
    base: &Checkpoint,
    exec: Exec,
) -> Result<AblationPoint> {
    let (checkpoint, log) = if weights == LossWeights::ZERO {
        (base.clone(), Vec::new())
    } else {
        let post = TrainConfig {
            weights,
            ..cfg.posttraining.clone()
        };
        posttrain_stage(cfg, &post, train_cases, base, exec)?
    };
    let predictions = sample_cases(&checkpoint, eval_cases, SampleSettings::from_config(cfg), exec)?;
    let report = evaluate_predictions(&checkpoint, eval_cases, predictions.clone(), exec)?;
    Ok(AblationPoint {
        weights,
        checkpoint,
        log,
        predictions,
        report,
    })
}

fn assemble(cfg: &RunConfig, base: &Checkpoint, rows: Vec<AblationRow>, first: &MetricsReport) -> AblationReport {
    AblationReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        base_step: base.step(),
        split: cfg.evaluation.split.clone(),
        case_count: first.case_count,
        lesion_case_count: first.lesion_case_count,
        rows,
    }
}

/// In-memory ablation over `cfg.evaluation.ablation_grid`.
pub fn ablate(
    cfg: &RunConfig,
    train_cases: &[PhantomCase],
    eval_cases: &[PhantomCase],
    base: &Checkpoint,
    exec: Exec,
) -> Result<AblationReport> {
    let grid = sorted_grid(&cfg.evaluation.ablation_grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut first = None;
    for w in grid {
        let p = ablation_point(cfg, w, train_cases, eval_cases, base, exec)?;
        rows.push(AblationRow::from_report(w, w != LossWeights::ZERO, &p.report));
        first.get_or_insert(p.report);
    }
    Ok(assemble(cfg, base, rows, first.as_ref().expect("grid is non-empty")))
}

// File-based stages.

fn load_manifest_and_split(data_dir: &Path, split: &str) -> Result<(DatasetManifest, Vec<PhantomCase>)> {
    let manifest = phantom::read_manifest(data_dir)?;
    let cases = phantom::load_split(data_dir, &manifest, split)?;
    Ok((manifest, cases))
}

fn save_with_log<T: Serialize>(ckpt: &mut Checkpoint, path: &Path, log_path: &Path, log: &[T]) -> Result<()> {
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(log_path, log)?;
    ckpt.log = log_path.file_name().map(|n| n.to_string_lossy().into_owned());
    save_checkpoint(ckpt, path)
}

pub fn run_generate(cfg: &RunConfig, run: &RunDir, exec: Exec) -> Result<DatasetManifest> {
    generate_dataset(cfg, &run.data(), exec)
}

pub fn run_train_ae(cfg: &RunConfig, run: &RunDir, data_dir: &Path, exec: Exec) -> Result<Checkpoint> {
    let (_, cases) = load_manifest_and_split(data_dir, "train")?;
    let (mut ckpt, log) = autoencoder_stage(cfg, &cases, exec)?;
    let stage = CheckpointStage::Autoencoder;
    save_with_log(&mut ckpt, &run.checkpoint(stage), &run.log(stage), &log)?;
    Ok(ckpt)
}

pub fn run_train_ldm(cfg: &RunConfig, run: &RunDir, data_dir: &Path, ae_path: &Path, exec: Exec) -> Result<Checkpoint> {
    let ae = load_checkpoint(ae_path)?;
    let (_, cases) = load_manifest_and_split(data_dir, "train")?;
    let (mut ckpt, log) = base_stage(cfg, &cases, &ae, exec)?;
    let stage = CheckpointStage::Base;
    save_with_log(&mut ckpt, &run.checkpoint(stage), &run.log(stage), &log)?;
    Ok(ckpt)
}

pub fn run_posttrain(cfg: &RunConfig, run: &RunDir, data_dir: &Path, base_path: &Path, exec: Exec) -> Result<Checkpoint> {
    let base = load_checkpoint(base_path)?;
    let (_, cases) = load_manifest_and_split(data_dir, "train")?;
    let (mut ckpt, log) = posttrain_stage(cfg, &cfg.posttraining, &cases, &base, exec)?;
    let stage = CheckpointStage::Posttrain;
    save_with_log(&mut ckpt, &run.checkpoint(stage), &run.log(stage), &log)?;
    Ok(ckpt)
}

/// Samples the evaluation split with the model at `ckpt_path` and writes
/// one prediction tensor per case into `pred_dir`.
pub fn run_sample(cfg: &RunConfig, data_dir: &Path, ckpt_path: &Path, pred_dir: &Path, exec: Exec) -> Result<Vec<String>> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let (_, cases) = load_manifest_and_split(data_dir, &cfg.evaluation.split)?;
    let preds = sample_cases(&ckpt, &cases, SampleSettings::from_config(cfg), exec)?;
    std::fs::create_dir_all(pred_dir).map_err(|e| Error::io(pred_dir, e))?;
    for (c, p) in cases.iter().zip(&preds) {
        metrics::write_prediction(pred_dir, &c.case_id, p)?;
    }
    Ok(cases.into_iter().map(|c| c.case_id).collect())
}

/// Scores the predictions in `pred_dir` and writes the report to `out`.
pub fn run_evaluate(cfg: &RunConfig, data_dir: &Path, ckpt_path: &Path, pred_dir: &Path, out: &Path, exec: Exec) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let manifest = phantom::read_manifest(data_dir)?;
    metrics::evaluate_dataset(
        pred_dir,
        data_dir,
        &manifest,
        &cfg.evaluation.split,
        &EncoderFeatures { ae: &ckpt.autoencoder },
        Some(&provenance(&ckpt)),
        out,
        exec,
    )
}

pub fn ablation_tag(w: &LossWeights) -> String {
    format!("li{}_ll{}", w.lambda_image, w.lambda_lesion)
}

/// Runs the ablation from the base checkpoint at `base_path`. Per-point
/// checkpoints, predictions and reports go under `run.ablation()`; the
/// table is written to `out` (JSON) and next to it with a `.csv` extension.
pub fn run_ablate(cfg: &RunConfig, run: &RunDir, data_dir: &Path, base_path: &Path, out: &Path, exec: Exec) -> Result<AblationReport> {
    let grid = sorted_grid(&cfg.evaluation.ablation_grid)?;
    let base = load_checkpoint(base_path)?;
    let (_, train_cases) = load_manifest_and_split(data_dir, "train")?;
    let (_, eval_cases) = load_manifest_and_split(data_dir, &cfg.evaluation.split)?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut first = None;
    for w in grid {
        let mut p = ablation_point(cfg, w, &train_cases, &eval_cases, &base, exec)?;
        let dir = run.ablation().join(ablation_tag(&w));
        let pred_dir = dir.join("predictions");
        std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
        for (c, x) in eval_cases.iter().zip(&p.predictions) {
            metrics::write_prediction(&pred_dir, &c.case_id, x)?;
        }
        if w != LossWeights::ZERO {
            save_with_log(&mut p.checkpoint, &dir.join("posttrain.ckpt"), &dir.join("posttrain_log.jsonl"), &p.log)?;
        }
        metrics::write_report(&dir.join("report.json"), &p.report)?;
        rows.push(AblationRow::from_report(w, w != LossWeights::ZERO, &p.report));
        first.get_or_insert(p.report);
    }
    let report = assemble(cfg, &base, rows, first.as_ref().expect("grid is non-empty"));
    write_json(out, &report)?;
    let csv = out.with_extension("csv");
    std::fs::write(&csv, report.to_csv()?).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}

/// Reads an ablation report, rejecting unknown keys and unsorted rows.
pub fn read_ablation_report(path: &Path) -> Result<AblationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let r: AblationReport = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let sorted = r.rows.windows(2).all(|p| {
        (p[0].lambda_image, p[0].lambda_lesion) < (p[1].lambda_image, p[1].lambda_lesion)
    });
    if !sorted {
        return Err(Error::format(path.display().to_string(), 0, "ablation rows are not sorted by (lambda_image, lambda_lesion)"));
    }
    Ok(r)
}
