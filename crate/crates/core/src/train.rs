//! Base training (latent loss) and lesion-aware post-training (latent +
//! image + lesion losses through the one-step ẑ0 decode).

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, AutoencoderArch};
use crate::denoiser::{bilinear_resize, Denoiser, DenoiserArch};
use crate::diffusion::{predict_z0, q_sample, z0_eps_jacobian, NoiseSchedule};
use crate::error::{arg_err, Error, Result};
use crate::exec::Exec;
use crate::grid::{Grid, ImageSlice, LatentGrid, LesionMask};
use crate::nn::Real;
use crate::objectives::{image_loss, image_loss_grad, latent_loss, latent_loss_grad, lesion_loss_grad, lesion_sums, total_loss, LossBreakdown, LossWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::phantom::PhantomCase;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Base,
    Posttrain,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Posttrain => "posttrain",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TSampling {
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub t_sampling: TSampling,
    /// Caps t during post-training; `None` samples the full range.
    pub t_max_posttrain: Option<usize>,
    pub freeze_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Base,
            steps: 3000,
            batch_size: 48,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            t_sampling: TSampling::Uniform,
            t_max_posttrain: None,
            freeze_decoder: true,
        }
    }
}

impl TrainConfig {
    pub fn posttrain_default() -> Self {
        Self {
            stage: Stage::Posttrain,
            steps: 1000,
            ..Self::default()
        }
    }

    /// `section` is the config path used in error messages.
    pub fn validate(&self, section: &str, steps_total: usize) -> Result<()> {
        let f = |name: &str| format!("{section}.{name}");
        if self.steps == 0 {
            return Err(Error::config(f("steps"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be at least 1"));
        }
        self.optimizer.validate(&f("optimizer"))?;
        self.weights.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("{section}.{field}"), message),
            other => other,
        })?;
        if let Some(tm) = self.t_max_posttrain {
            if tm == 0 || tm > steps_total {
                return Err(Error::config(f("t_max_posttrain"), format!("must lie in 1..={steps_total}")));
            }
        }
        Ok(())
    }
}

/// A latent diffusion process as seen by the trainer.
///
/// Law: `estimate_clean(perturb(z0, t, n), model_target(z0, n, t), t) == z0`.
pub trait LatentProcess: Sync {
    fn steps(&self) -> usize;
    fn perturb<T: Real>(&self, z0: &Grid<T>, t: usize, noise: &Grid<T>) -> Result<Grid<T>>;
    fn estimate_clean<T: Real>(&self, z_t: &Grid<T>, model_out: &Grid<T>, t: usize) -> Result<Grid<T>>;
    fn model_target<T: Real>(&self, z0: &Grid<T>, noise: &Grid<T>, t: usize) -> Result<Grid<T>>;
    /// Elementwise ∂ estimate_clean / ∂ model_out.
    fn clean_sensitivity(&self, t: usize) -> f64;
}

/// ε-prediction DDPM.
#[derive(Clone, Debug, PartialEq)]
pub struct Ddpm {
    pub schedule: NoiseSchedule,
}

impl LatentProcess for Ddpm {
    fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn perturb<T: Real>(&self, z0: &Grid<T>, t: usize, noise: &Grid<T>) -> Result<Grid<T>> {
        q_sample(z0, t, noise, &self.schedule)
    }

    fn estimate_clean<T: Real>(&self, z_t: &Grid<T>, model_out: &Grid<T>, t: usize) -> Result<Grid<T>> {
        predict_z0(z_t, model_out, t, &self.schedule)
    }

    fn model_target<T: Real>(&self, _z0: &Grid<T>, noise: &Grid<T>, _t: usize) -> Result<Grid<T>> {
        Ok(noise.clone())
    }

    fn clean_sensitivity(&self, t: usize) -> f64 {
        z0_eps_jacobian(t, &self.schedule)
    }
}

/// One training example with everything the frozen encoder and the
/// parameter-free part of the rescaler can precompute.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub z0: LatentGrid,
    pub resized: Grid<f32>,
    pub target: ImageSlice,
    pub mask: Option<LesionMask>,
}

pub fn prepare_items(cases: &[PhantomCase], ae: &Autoencoder, exec: Exec) -> Result<Vec<TrainItem>> {
    let out = exec.map(cases, |case| -> Result<TrainItem> {
        let z0 = ae.encode(&case.target)?;
        let resized = bilinear_resize(&case.source, z0.h, z0.w)?;
        Ok(TrainItem {
            z0,
            resized,
            target: case.target.clone(),
            mask: Some(case.mask.clone()),
        })
    });
    out.into_iter().collect()
}

/// Image-space context for one sample.
pub struct ImageSpace<'a, T> {
    pub ae: &'a AutoencoderArch,
    pub params: &'a [T],
    pub latent_scale: f64,
    pub target: &'a Grid<T>,
    pub mask: &'a LesionMask,
    pub weights: LossWeights,
    /// Masked element count over the whole batch.
    pub lesion_denom: usize,
    pub decoder_grads: bool,
}

/// Unweighted per-sample loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleTerms {
    pub latent: f64,
    pub image: f64,
    pub lesion_sum: f64,
    pub lesion_count: usize,
    pub denoiser_calls: u32,
}

impl SampleTerms {
    /// This sample's share of the batch objective.
    pub fn objective(&self, weights: &LossWeights, batch_scale: f64, lesion_denom: usize) -> f64 {
        let lesion = if lesion_denom == 0 {
            0.0
        } else {
            self.lesion_sum / lesion_denom as f64
        };
        batch_scale * (self.latent + weights.lambda_image * self.image) + weights.lambda_lesion * lesion
    }
}

pub struct SampleGrads<T> {
    pub terms: SampleTerms,
    pub denoiser: Vec<T>,
    pub autoencoder: Option<Vec<T>>,
}

/// Loss terms and gradients for one (z0, t, ε) draw. The returned
/// gradients are those of [`SampleTerms::objective`]; image-space terms are
/// evaluated only when `image` is given and backpropagated only when a
/// weight is nonzero.
#[allow(clippy::too_many_arguments)]
pub fn sample_gradient<T: Real, P: LatentProcess>(
    den: &DenoiserArch,
    dp: &[T],
    process: &P,
    z0: &Grid<T>,
    resized: &Grid<T>,
    t: usize,
    noise: &Grid<T>,
    image: Option<&ImageSpace<'_, T>>,
    batch_scale: f64,
) -> Result<SampleGrads<T>> {
    let z_t = process.perturb(z0, t, noise)?;
    let target = process.model_target(z0, noise, t)?;
    let (out, tape) = den.forward_tape(dp, &z_t, t, resized)?;
    let mut terms = SampleTerms {
        latent: latent_loss(&target, &out)?,
        denoiser_calls: 1,
        ..Default::default()
    };
    let mut dout = latent_loss_grad(&target, &out, batch_scale);
    let mut ae_grads = None;
    if let Some(img) = image {
        let z0_hat = process.estimate_clean(&z_t, &out, t)?;
        let inv = T::cst(1.0 / img.latent_scale);
        let z_raw = Grid {
            data: z0_hat.data.iter().map(|&v| v * inv).collect(),
            ..z0_hat
        };
        img.ae.check_latent(&z_raw)?;
        let dtape = img.ae.decode_tape(img.params, &z_raw);
        let x_hat = dtape.output();
        terms.image = image_loss(img.target, x_hat)?;
        let (ls, lc) = lesion_sums(img.target, x_hat, img.mask)?;
        terms.lesion_sum = ls;
        terms.lesion_count = lc;
        if img.weights.uses_image_space() {
            let mut dx = image_loss_grad(img.target, x_hat, batch_scale * img.weights.lambda_image);
            dx.add_assign(&lesion_loss_grad(img.target, x_hat, img.mask, img.lesion_denom, img.weights.lambda_lesion));
            let mut g = img.decoder_grads.then(|| vec![T::zero(); img.params.len()]);
            let dz_raw = img.ae.decode_backward(img.params, &dtape, dx, g.as_deref_mut());
            let k = T::cst(process.clean_sensitivity(t) / img.latent_scale);
            for (d, &v) in dout.data.iter_mut().zip(&dz_raw.data) {
                *d += k * v;
            }
            ae_grads = g;
        }
    }
    let mut grads = vec![T::zero(); dp.len()];
    den.backward(dp, &tape, &dout, &mut grads);
    Ok(SampleGrads {
        terms,
        denoiser: grads,
        autoencoder: ae_grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub stage: Stage,
    pub latent: f64,
    pub image: f64,
    pub lesion: f64,
    pub total: f64,
    pub wall_ms: u64,
}

/// Mutable training state carried across stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub denoiser: Denoiser,
    pub optimizer: AdamW,
    pub decoder_optimizer: Option<AdamW>,
    /// Global step counter; keys the per-step random streams.
    pub step: u64,
    pub denoiser_calls: u64,
}

impl TrainRun {
    pub fn new(denoiser: Denoiser, optimizer: AdamWConfig) -> Self {
        let n = denoiser.params.len();
        Self {
            denoiser,
            optimizer: AdamW::new(n, optimizer),
            decoder_optimizer: None,
            step: 0,
            denoiser_calls: 0,
        }
    }
}

/// The timestep and noise of sample `j` at `step`.
pub fn draw(seed: u64, step: u64, j: usize, t_hi: usize, shape: (usize, usize, usize)) -> (usize, LatentGrid) {
    let mut r = rng::stream(&[seed, rng::tag::STEP, step, j as u64]);
    let t = r.random_range(1..=t_hi);
    let (c, h, w) = shape;
    let eps = Grid {
        c,
        h,
        w,
        data: rng::normal_vec(&mut r, c * h * w),
    };
    (t, eps)
}

fn check_items(items: &[TrainItem], ae: &Autoencoder, den: &Denoiser) -> Result<()> {
    let Some(first) = items.first() else {
        return Err(Error::config("data", "training set is empty"));
    };
    if first.z0.c != ae.latent_channels() || first.z0.c != den.arch.config.latent_channels {
        return Err(Error::config(
            "denoiser.latent_channels",
            format!("autoencoder produces {} latent channels", first.z0.c),
        ));
    }
    if items.iter().any(|it| !it.z0.same_shape(&first.z0)) {
        return Err(arg_err!("training latents differ in shape"));
    }
    Ok(())
}

/// Base stage: only the denoiser (and rescaler) learn, on the latent loss.
pub fn train_base<P: LatentProcess>(
    items: &[TrainItem],
    ae: &Autoencoder,
    run: &mut TrainRun,
    config: &TrainConfig,
    process: &P,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrainLogRecord>> {
    if config.stage != Stage::Base {
        return Err(Error::config("training.stage", "train_base requires stage `base`"));
    }
    config.validate("training", process.steps())?;
    check_items(items, ae, &run.denoiser)?;
    let mut ae_copy = None;
    run_steps(items, ae, &mut ae_copy, run, config, process, seed, exec)
}

/// Post-training stage: adds the image and lesion losses on the decoded
/// one-step estimate. The decoder learns only when `freeze_decoder` is off.
pub fn posttrain<P: LatentProcess>(
    items: &[TrainItem],
    ae: &mut Autoencoder,
    run: &mut TrainRun,
    config: &TrainConfig,
    process: &P,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrainLogRecord>> {
    if config.stage != Stage::Posttrain {
        return Err(Error::config("posttraining.stage", "posttrain requires stage `posttrain`"));
    }
    config.validate("posttraining", process.steps())?;
    check_items(items, ae, &run.denoiser)?;
    if items.iter().any(|it| it.mask.is_none()) {
        return Err(Error::config("data", "post-training requires a lesion mask for every case"));
    }
    let frozen = ae.clone();
    let mut trainable = (!config.freeze_decoder).then(|| ae.clone());
    let log = run_steps(items, &frozen, &mut trainable, run, config, process, seed, exec)?;
    if let Some(updated) = trainable {
        *ae = updated;
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn run_steps<P: LatentProcess>(
    items: &[TrainItem],
    ae_frozen: &Autoencoder,
    ae_trainable: &mut Option<Autoencoder>,
    run: &mut TrainRun,
    config: &TrainConfig,
    process: &P,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrainLogRecord>> {
    let post = config.stage == Stage::Posttrain;
    let t_hi = if post {
        config.t_max_posttrain.unwrap_or(process.steps())
    } else {
        process.steps()
    };
    let b = config.batch_size;
    let batch_scale = 1.0 / b as f64;
    let shape = items[0].z0.shape();
    let weights = config.weights;
    let dec_range = ae_frozen.arch.decoder_range();
    run.optimizer.config = config.optimizer;
    if ae_trainable.is_some() {
        match run.decoder_optimizer.as_mut() {
            Some(opt) => opt.config = config.optimizer,
            None => run.decoder_optimizer = Some(AdamW::new(dec_range.len(), config.optimizer)),
        }
    }
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = rng::batch_indices(items.len(), b, seed, run.step);
        let lesion_denom: usize = if post {
            batch
                .iter()
                .map(|&i| items[i].mask.as_ref().map_or(0, |m| m.area()) * items[i].target.c)
                .sum()
        } else {
            0
        };
        let ae_now = ae_trainable.as_ref().unwrap_or(ae_frozen);
        let den = &run.denoiser;
        let results = exec.map_range(b, |j| -> Result<SampleGrads<f32>> {
            let item = &items[batch[j]];
            let (t, eps) = draw(seed, run.step, j, t_hi, shape);
            let mask;
            let image = if post {
                mask = item.mask.as_ref().expect("masks checked");
                Some(ImageSpace {
                    ae: &ae_now.arch,
                    params: &ae_now.params,
                    latent_scale: ae_now.latent_scale as f64,
                    target: &item.target,
                    mask,
                    weights,
                    lesion_denom,
                    decoder_grads: ae_trainable.is_some(),
                })
            } else {
                None
            };
            sample_gradient(&den.arch, &den.params, process, &item.z0, &item.resized, t, &eps, image.as_ref(), batch_scale)
        });
        let mut grads = vec![0.0f32; run.denoiser.params.len()];
        let mut dec_grads = ae_trainable.as_ref().map(|_| vec![0.0f32; dec_range.len()]);
        let (mut latent, mut image, mut lesion_sum) = (0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            latent += r.terms.latent * batch_scale;
            image += r.terms.image * batch_scale;
            lesion_sum += r.terms.lesion_sum;
            run.denoiser_calls += r.terms.denoiser_calls as u64;
            for (a, v) in grads.iter_mut().zip(&r.denoiser) {
                *a += v;
            }
            if let (Some(dg), Some(ag)) = (dec_grads.as_mut(), r.autoencoder.as_ref()) {
                for (a, v) in dg.iter_mut().zip(&ag[dec_range.clone()]) {
                    *a += v;
                }
            }
        }
        let lesion = if lesion_denom == 0 {
            0.0
        } else {
            lesion_sum / lesion_denom as f64
        };
        let breakdown: LossBreakdown = if post {
            total_loss(latent, image, lesion, &weights)
        } else {
            total_loss(latent, 0.0, 0.0, &LossWeights::ZERO)
        };
        if !breakdown.total.is_finite() {
            return Err(arg_err!("non-finite loss at step {}", run.step));
        }
        run.optimizer.update(&mut run.denoiser.params, &grads);
        if let (Some(ae), Some(dg), Some(opt)) = (ae_trainable.as_mut(), dec_grads.as_ref(), run.decoder_optimizer.as_mut()) {
            opt.update(&mut ae.params[dec_range.clone()], dg);
        }
        log.push(TrainLogRecord {
            step: run.step,
            stage: config.stage,
            latent: breakdown.latent,
            image: breakdown.image,
            lesion: breakdown.lesion,
            total: breakdown.total,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        run.step += 1;
    }
    Ok(log)
}

/// Writes a training log as JSON lines.
pub fn write_log(path: &std::path::Path, log: &[TrainLogRecord]) -> Result<()> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::json("training log", e))?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
