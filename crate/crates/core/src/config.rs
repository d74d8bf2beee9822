//! Run configuration: one JSON document with a section per stage.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AutoencoderConfig, DOWNSAMPLE_FACTOR};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleDescriptor;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::phantom::{split_sizes, PhantomConfig, TARGET_CHANNELS};
use crate::train::{Stage, TrainConfig};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_cases: usize,
    /// (train, val, test)
    pub split_ratios: [f64; 3],
    /// Lesion prevalence overrides keyed by split name.
    pub split_prevalence: BTreeMap<String, f64>,
    pub phantom: PhantomConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_cases: 300,
            split_ratios: [0.7, 0.1, 0.2],
            split_prevalence: BTreeMap::new(),
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleDescriptor,
    /// DDIM steps used for sampling.
    pub sampling_steps: usize,
    pub eta: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleDescriptor::default(),
            sampling_steps: 200,
            eta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub split: String,
    /// (λ_image, λ_lesion) points visited by `ablate`.
    pub ablation_grid: Vec<LossWeights>,
}

pub fn default_ablation_grid() -> Vec<LossWeights> {
    [
        (0.0, 0.0),
        (0.01, 0.0),
        (0.01, 0.01),
        (0.01, 0.02),
        (0.01, 0.05),
        (0.05, 0.0),
        (0.05, 0.1),
        (0.05, 0.2),
        (0.1, 0.0),
        (0.1, 0.1),
        (0.1, 0.2),
    ]
    .into_iter()
    .map(|(i, l)| LossWeights::new(i, l))
    .collect()
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            ablation_grid: default_ablation_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub autoencoder: AutoencoderConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    pub posttraining: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            training: TrainConfig::default(),
            posttraining: TrainConfig::posttrain_default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.{field}"), message),
        other => other,
    }
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys. Errors name the offending path.
    /// Keys missing from `posttraining` take post-training defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        if let Some(serde_json::Value::Object(post)) = value.get_mut("posttraining") {
            let serde_json::Value::Object(defaults) = serde_json::to_value(TrainConfig::posttrain_default()).expect("config serializes") else {
                unreachable!()
            };
            for (k, v) in defaults {
                post.entry(k).or_insert(v);
            }
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "config".to_string() } else { path };
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_cases == 0 {
            return Err(Error::config("data.n_cases", "must be at least 1"));
        }
        let [a, b, c] = d.split_ratios;
        let (ntr, _, nte) = split_sizes(d.n_cases, (a, b, c)).map_err(|e| prefixed("data", e))?;
        if ntr == 0 || nte == 0 {
            return Err(Error::config("data.n_cases", "train and test splits must be non-empty"));
        }
        for (name, p) in &d.split_prevalence {
            if !SPLITS.contains(&name.as_str()) {
                return Err(Error::config(format!("data.split_prevalence.{name}"), "unknown split"));
            }
            if !(0.0..=1.0).contains(p) {
                return Err(Error::config(format!("data.split_prevalence.{name}"), "must lie in [0, 1]"));
            }
        }
        d.phantom.validate().map_err(|e| prefixed("data.phantom", e))?;
        let [h, w] = d.phantom.image_size;
        let need = DOWNSAMPLE_FACTOR * 4;
        if h % need != 0 || w % need != 0 {
            return Err(Error::config(
                "data.phantom.image_size",
                format!("must be divisible by {need} (autoencoder factor × denoiser factor)"),
            ));
        }

        self.autoencoder.validate()?;
        if self.autoencoder.image_channels != TARGET_CHANNELS {
            return Err(Error::config(
                "autoencoder.image_channels",
                format!("must equal the {TARGET_CHANNELS} target channels"),
            ));
        }
        self.denoiser.validate()?;
        if self.denoiser.latent_channels != self.autoencoder.latent_channels {
            return Err(Error::config("denoiser.latent_channels", "must equal autoencoder.latent_channels"));
        }
        if self.denoiser.source_channels != d.phantom.n_source_channels {
            return Err(Error::config("denoiser.source_channels", "must equal data.phantom.n_source_channels"));
        }

        let sched = self.diffusion.schedule.build()?;
        let t = sched.steps();
        if self.diffusion.sampling_steps == 0 || self.diffusion.sampling_steps > t {
            return Err(Error::config("diffusion.sampling_steps", format!("must lie in 1..={t}")));
        }
        if !(0.0..=1.0).contains(&self.diffusion.eta) {
            return Err(Error::config("diffusion.eta", "must lie in [0, 1]"));
        }

        if self.training.stage != Stage::Base {
            return Err(Error::config("training.stage", "must be `base`"));
        }
        self.training.validate("training", t)?;
        if self.posttraining.stage != Stage::Posttrain {
            return Err(Error::config("posttraining.stage", "must be `posttrain`"));
        }
        self.posttraining.validate("posttraining", t)?;

        if !SPLITS.contains(&self.evaluation.split.as_str()) {
            return Err(Error::config("evaluation.split", "must be one of train, val, test"));
        }
        for (i, w) in self.evaluation.ablation_grid.iter().enumerate() {
            w.validate().map_err(|e| prefixed(&format!("evaluation.ablation_grid[{i}]"), e))?;
        }
        Ok(())
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.data.split_ratios;
        (a, b, c)
    }
}
