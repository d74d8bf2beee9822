use lapt_core::checkpoint::{self, CheckpointStage};
use lapt_core::config::RunConfig;
use lapt_core::metrics::MetricsReport;
use lapt_core::objectives::LossWeights;
use lapt_core::pipeline::{self, RunDir};
use lapt_core::{Error, Exec};

fn tiny(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.n_cases = 12;
    cfg.data.split_ratios = [0.5, 0.25, 0.25];
    cfg.data.phantom.image_size = [32, 32];
    cfg.data.phantom.lesion_prevalence = 0.5;
    cfg.autoencoder.widths = [4, 4];
    cfg.autoencoder.steps = 5;
    cfg.denoiser.base_width = 8;
    cfg.denoiser.groups = 4;
    cfg.diffusion.schedule.steps = 20;
    cfg.diffusion.sampling_steps = 4;
    cfg.training.steps = 3;
    cfg.training.batch_size = 2;
    cfg.posttraining.steps = 2;
    cfg.posttraining.batch_size = 2;
    cfg.validate().unwrap();
    cfg
}

fn base_run(cfg: &RunConfig, root: &std::path::Path) -> RunDir {
    let run = RunDir::new(root);
    let ex = Exec::Parallel;
    pipeline::run_generate(cfg, &run, ex).unwrap();
    pipeline::run_train_ae(cfg, &run, &run.data(), ex).unwrap();
    pipeline::run_train_ldm(cfg, &run, &run.data(), &run.checkpoint(CheckpointStage::Autoencoder), ex).unwrap();
    run
}

#[test]
fn artifacts_carry_provenance_and_reports_are_consistent() {
    let cfg = tiny(4);
    let dir = tempfile::tempdir().unwrap();
    let run = base_run(&cfg, dir.path());
    let ex = Exec::Parallel;
    let post = pipeline::run_posttrain(&cfg, &run, &run.data(), &run.checkpoint(CheckpointStage::Base), ex).unwrap();
    assert_eq!(post.stage, CheckpointStage::Posttrain);
    assert_eq!(post.step(), 5);
    assert_eq!(post.seed, 4);
    assert_eq!(post.config_hash, cfg.hash());

    let ckpt = run.checkpoint(CheckpointStage::Posttrain);
    let bytes = std::fs::read(&ckpt).unwrap();
    let again = checkpoint::to_bytes(&checkpoint::load_checkpoint(&ckpt).unwrap()).unwrap();
    assert_eq!(bytes, again, "save -> load -> save changed bytes");

    let preds = run.predictions(CheckpointStage::Posttrain);
    pipeline::run_sample(&cfg, &run.data(), &ckpt, &preds, ex).unwrap();
    let out = run.report(CheckpointStage::Posttrain);
    pipeline::run_evaluate(&cfg, &run.data(), &ckpt, &preds, &out, ex).unwrap();
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.seed, Some(4));
    assert_eq!(report.config_hash.as_deref(), Some(cfg.hash().as_str()));
    for agg in &report.aggregate {
        let rows: Vec<_> = report.per_case.iter().filter(|r| r.modality == agg.modality).collect();
        let mean = rows.iter().map(|r| r.mae).sum::<f64>() / rows.len() as f64;
        assert!((mean - agg.mae).abs() <= 1e-9 * mean.abs());
        let lesion: Vec<f64> = rows.iter().filter_map(|r| r.lesion_mae).collect();
        assert_eq!(lesion.len(), agg.lesion_cases);
    }
    let manifest = lapt_core::phantom::read_manifest(&run.data()).unwrap();
    assert_eq!(manifest.config_hash.as_deref(), Some(cfg.hash().as_str()));
}

#[test]
fn empty_ablation_grid_is_a_config_error() {
    let mut cfg = tiny(1);
    cfg.evaluation.ablation_grid.clear();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let err = pipeline::run_ablate(&cfg, &run, &run.data(), &run.checkpoint(CheckpointStage::Base), &dir.path().join("a.json"), Exec::Parallel)
        .unwrap_err();
    assert!(matches!(&err, Error::Config { field, .. } if field == "evaluation.ablation_grid"), "{err}");
}

#[test]
fn ablation_rows_are_sorted_and_zero_point_is_the_base_model() {
    let mut cfg = tiny(2);
    cfg.evaluation.ablation_grid = vec![LossWeights::new(0.1, 0.2), LossWeights::ZERO, LossWeights::new(0.01, 0.02)];
    let dir = tempfile::tempdir().unwrap();
    let run = base_run(&cfg, dir.path());
    let out = dir.path().join("ablation.json");
    let report = pipeline::run_ablate(&cfg, &run, &run.data(), &run.checkpoint(CheckpointStage::Base), &out, Exec::Parallel).unwrap();
    let keys: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.lambda_image, r.lambda_lesion)).collect();
    assert_eq!(keys, vec![(0.0, 0.0), (0.01, 0.02), (0.1, 0.2)]);
    assert!(!report.rows[0].posttrained && report.rows[1].posttrained);
    assert_eq!(pipeline::read_ablation_report(&out).unwrap(), report);
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.starts_with("lambda_image,lambda_lesion,posttrained,DWI_mae"));
    assert!(run.ablation().join("li0.01_ll0.02/posttrain.ckpt").exists());
    assert!(!run.ablation().join("li0_ll0/posttrain.ckpt").exists());
}
