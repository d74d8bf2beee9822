//! Noise schedules, the forward process, the one-step clean-latent
//! estimate and DDIM sampling. Nothing here knows about a particular
//! denoiser; randomness always comes in through explicit arguments.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::grid::{Grid, LatentGrid};
use crate::nn::Real;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description from which the tables are recomputed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDescriptor {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleDescriptor {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Per-timestep tables for t = 1..=T (stored at index t − 1).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    descriptor: Option<ScheduleDescriptor>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("diffusion.T", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(
            "diffusion.beta_start",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
        ));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let mut s = NoiseSchedule::from_betas(beta)?;
    s.descriptor = Some(ScheduleDescriptor {
        steps,
        beta_start,
        beta_end,
        kind,
    });
    Ok(s)
}

impl NoiseSchedule {
    /// Builds the tables from explicit betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("diffusion.beta", "schedule needs at least one step"));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("diffusion.beta", format!("beta[{}] = {b} outside (0, 1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0f64, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            descriptor: None,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn descriptor(&self) -> Option<&ScheduleDescriptor> {
        self.descriptor.as_ref()
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(arg_err!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// Re-derives ᾱ and checks the schedule invariants, optionally against
    /// a stored ᾱ_T.
    pub fn validate(&self, stored_alpha_bar_t: Option<f64>) -> Result<()> {
        let mut acc = 1.0f64;
        for (i, (&a, &ab)) in self.alpha.iter().zip(&self.alpha_bar).enumerate() {
            acc *= a;
            if ((acc - ab) / acc).abs() > 1e-12 {
                return Err(Error::config("diffusion", format!("alpha_bar[{}] inconsistent with alpha", i + 1)));
            }
            if i > 0 && ab >= self.alpha_bar[i - 1] {
                return Err(Error::config("diffusion", format!("alpha_bar not strictly decreasing at {}", i + 1)));
            }
        }
        if let Some(stored) = stored_alpha_bar_t {
            let ab = *self.alpha_bar.last().unwrap();
            if ((stored - ab) / ab).abs() > 1e-12 {
                return Err(Error::config(
                    "schedule.alpha_bar_T",
                    format!("stored {stored} does not match recomputed {ab}"),
                ));
            }
        }
        Ok(())
    }
}

fn check_same<T, U>(a: &Grid<T>, b: &Grid<U>, what: &str) -> Result<()>
where
    T: Copy + Default,
    U: Copy + Default,
{
    if !a.same_shape(b) {
        return Err(arg_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `ca·a + cb·b`, evaluated in f64 and rounded once.
fn combine<T: Real>(a: &Grid<T>, ca: f64, b: &Grid<T>, cb: f64) -> Grid<T> {
    Grid {
        c: a.c,
        h: a.h,
        w: a.w,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| T::cst(ca * x.f64() + cb * y.f64()))
            .collect(),
    }
}

/// z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε
pub fn q_sample<T: Real>(z0: &Grid<T>, t: usize, eps: &Grid<T>, sched: &NoiseSchedule) -> Result<Grid<T>> {
    sched.check_t(t)?;
    check_same(z0, eps, "q_sample")?;
    let ab = sched.alpha_bar(t);
    Ok(combine(z0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// ẑ0 = (z_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t
pub fn predict_z0<T: Real>(z_t: &Grid<T>, eps_hat: &Grid<T>, t: usize, sched: &NoiseSchedule) -> Result<Grid<T>> {
    sched.check_t(t)?;
    check_same(z_t, eps_hat, "predict_z0")?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    Ok(combine(z_t, inv, eps_hat, -(1.0 - ab).sqrt() * inv))
}

/// d ẑ0 / d ε̂, the scalar chain factor used by image-space losses.
pub fn z0_eps_jacobian(t: usize, sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar(t);
    -((1.0 - ab) / ab).sqrt()
}

/// One DDIM update from `t` to `t_prev` (ᾱ_0 = 1).
pub fn ddim_step<T: Real>(
    z_t: &Grid<T>,
    eps_hat: &Grid<T>,
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    noise: Option<&Grid<T>>,
) -> Result<Grid<T>> {
    if t_prev >= t {
        return Err(arg_err!("ddim_step needs t_prev < t, got t_prev={t_prev}, t={t}"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(arg_err!("eta must lie in [0, 1], got {eta}"));
    }
    match (eta > 0.0, noise) {
        (true, None) => return Err(arg_err!("eta = {eta} > 0 requires a noise grid")),
        (false, Some(_)) => return Err(arg_err!("noise given but eta = 0")),
        (_, Some(n)) => check_same(z_t, n, "ddim_step noise")?,
        _ => {}
    }
    let z0 = predict_z0(z_t, eps_hat, t, sched)?;
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let mut out = combine(&z0, ab_p.sqrt(), eps_hat, dir);
    if let Some(n) = noise {
        let s = T::cst(sigma);
        for (o, &v) in out.data.iter_mut().zip(&n.data) {
            *o += s * v;
        }
    }
    Ok(out)
}

/// Evenly spaced timesteps over [1, T] including both ends (rounded
/// down), in descending order.
pub fn timesteps(steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > steps {
        return Err(arg_err!("n_steps must lie in 1..={steps}, got {n_steps}"));
    }
    let mut ts: Vec<usize> = if n_steps == 1 {
        vec![steps]
    } else {
        (0..n_steps).map(|i| 1 + i * (steps - 1) / (n_steps - 1)).collect()
    };
    ts.reverse();
    Ok(ts)
}

/// DDIM sampling from standard-normal z_T.
///
/// `denoiser(z_t, t, condition)` returns ε̂. The trajectory visits
/// [`timesteps`] and ends with a step to t_prev = 0.
#[allow(clippy::too_many_arguments)]
pub fn sample<C: ?Sized, F>(
    mut denoiser: F,
    condition: &C,
    sched: &NoiseSchedule,
    latent_shape: (usize, usize, usize),
    n_steps: usize,
    eta: f64,
    rng_seed: u64,
) -> Result<LatentGrid>
where
    F: FnMut(&LatentGrid, usize, &C) -> Result<LatentGrid>,
{
    let ts = timesteps(sched.steps(), n_steps)?;
    let (c, h, w) = latent_shape;
    let mut r = rng::stream(&[rng_seed, tag::SAMPLE]);
    let mut z = Grid::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w))?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = denoiser(&z, t, condition)?;
        if !eps.same_shape(&z) {
            return Err(Error::Contract(format!(
                "denoiser returned shape {:?} for latent of shape {:?}",
                eps.shape(),
                z.shape()
            )));
        }
        let noise = if eta > 0.0 {
            Some(Grid::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w))?)
        } else {
            None
        };
        z = ddim_step(&z, &eps, t, t_prev, eta, sched, noise.as_ref())?;
    }
    Ok(z)
}
