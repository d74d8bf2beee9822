//! Training objectives: latent ε-prediction loss, decoded image-space loss,
//! lesion-masked image-space loss, and their weighted total.
//!
//! All three are mean squared errors normalized by element count (the
//! lesion term by masked elements × channels), so the λ weights mean the
//! same thing at any resolution. An empty mask contributes 0.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::grid::{Grid, LesionMask};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_image: f64,
    pub lambda_lesion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_image: 0.01,
            lambda_lesion: 0.02,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_image: 0.0,
        lambda_lesion: 0.0,
    };

    pub fn new(lambda_image: f64, lambda_lesion: f64) -> Self {
        Self {
            lambda_image,
            lambda_lesion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_image", self.lambda_image), ("lambda_lesion", self.lambda_lesion)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("weights.{name}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// Whether any image-space term is active.
    pub fn uses_image_space(&self) -> bool {
        self.lambda_image != 0.0 || self.lambda_lesion != 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub latent: f64,
    pub image: f64,
    pub lesion: f64,
    pub total: f64,
}

fn check_shapes<T: Real>(a: &Grid<T>, b: &Grid<T>, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(arg_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn mse<T: Real>(a: &Grid<T>, b: &Grid<T>) -> f64 {
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (y - x).f64();
            d * d
        })
        .sum();
    s / a.data.len() as f64
}

fn mse_grad<T: Real>(target: &Grid<T>, pred: &Grid<T>, scale: f64) -> Grid<T> {
    let k = T::cst(2.0 * scale / pred.data.len() as f64);
    Grid {
        c: pred.c,
        h: pred.h,
        w: pred.w,
        data: pred.data.iter().zip(&target.data).map(|(&p, &t)| k * (p - t)).collect(),
    }
}

/// Mean squared error between the injected and predicted noise.
pub fn latent_loss<T: Real>(eps: &Grid<T>, eps_hat: &Grid<T>) -> Result<f64> {
    check_shapes(eps, eps_hat, "latent_loss")?;
    Ok(mse(eps, eps_hat))
}

/// `scale · d latent_loss / d eps_hat`.
pub fn latent_loss_grad<T: Real>(eps: &Grid<T>, eps_hat: &Grid<T>, scale: f64) -> Grid<T> {
    mse_grad(eps, eps_hat, scale)
}

/// Mean squared error between the target image and the decoded estimate.
pub fn image_loss<T: Real>(x: &Grid<T>, x_hat: &Grid<T>) -> Result<f64> {
    check_shapes(x, x_hat, "image_loss")?;
    Ok(mse(x, x_hat))
}

pub fn image_loss_grad<T: Real>(x: &Grid<T>, x_hat: &Grid<T>, scale: f64) -> Grid<T> {
    mse_grad(x, x_hat, scale)
}

fn check_mask<T: Real>(x: &Grid<T>, mask: &LesionMask) -> Result<()> {
    if mask.h != x.h || mask.w != x.w {
        return Err(arg_err!("mask {}×{} does not match image {}×{}", mask.h, mask.w, x.h, x.w));
    }
    mask.check_binary()
}

/// Squared masked residual sum and masked element count (mask broadcast
/// over channels). Pixels outside the mask are never read.
pub fn lesion_sums<T: Real>(x: &Grid<T>, x_hat: &Grid<T>, mask: &LesionMask) -> Result<(f64, usize)> {
    check_shapes(x, x_hat, "lesion_loss")?;
    check_mask(x, mask)?;
    let pl = x.plane_len();
    let mut sum = 0.0f64;
    for ch in 0..x.c {
        let (a, b) = (x.plane(ch), x_hat.plane(ch));
        for i in 0..pl {
            let m = mask.data[i];
            if m != 0.0 {
                let d = (b[i] - a[i]).f64();
                sum += m as f64 * (d * d);
            }
        }
    }
    Ok((sum, mask.area() * x.c))
}

/// Squared error restricted to lesion pixels, averaged over masked
/// elements; 0 when the mask is empty.
pub fn lesion_loss<T: Real>(x: &Grid<T>, x_hat: &Grid<T>, mask: &LesionMask) -> Result<f64> {
    let (sum, count) = lesion_sums(x, x_hat, mask)?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of `Σ mask·(x_hat − x)² / denom` w.r.t. x_hat, times `scale`.
pub fn lesion_loss_grad<T: Real>(x: &Grid<T>, x_hat: &Grid<T>, mask: &LesionMask, denom: usize, scale: f64) -> Grid<T> {
    let mut g = Grid::zeros(x.c, x.h, x.w);
    if denom == 0 {
        return g;
    }
    let k = T::cst(2.0 * scale / denom as f64);
    let pl = x.plane_len();
    for ch in 0..x.c {
        let (a, b) = (x.plane(ch), x_hat.plane(ch));
        let out = g.plane_mut(ch);
        for i in 0..pl {
            let m = mask.data[i];
            if m != 0.0 {
                out[i] = k * T::cst(m as f64) * (b[i] - a[i]);
            }
        }
    }
    g
}

/// total = latent + λ_image · image + λ_lesion · lesion
pub fn total_loss(latent: f64, image: f64, lesion: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        latent,
        image,
        lesion,
        total: latent + weights.lambda_image * image + weights.lambda_lesion * lesion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn rand_grid(c: usize, h: usize, w: usize, seed: u64) -> Grid<f64> {
        let mut r = rng::stream(&[seed]);
        Grid::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w)).unwrap()
    }

    fn rand_mask(h: usize, w: usize, seed: u64) -> LesionMask {
        let v = (0..h * w).map(|i| if rng::mix(&[seed, i as u64]).is_multiple_of(3) { 1.0 } else { 0.0 }).collect();
        LesionMask::from_vec(h, w, v).unwrap()
    }

    #[test]
    fn latent_loss_examples() {
        let a = rand_grid(4, 3, 3, 1);
        assert_eq!(latent_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.5);
        assert!((latent_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        let c = rand_grid(4, 3, 3, 2);
        let mut s = 0.0;
        for i in 0..a.data.len() {
            s += (a.data[i] - c.data[i]) * (a.data[i] - c.data[i]);
        }
        let want = s / 36.0;
        assert!(((latent_loss(&a, &c).unwrap() - want) / want).abs() < 1e-12);
        assert!(latent_loss(&a, &rand_grid(4, 3, 2, 1)).is_err());
    }

    #[test]
    fn image_loss_examples() {
        let x = rand_grid(2, 5, 5, 3);
        assert_eq!(image_loss(&x, &x).unwrap(), 0.0);
        let mut xh = x.clone();
        xh.data.iter_mut().for_each(|v| *v += 0.3);
        assert!((image_loss(&x, &xh).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn lesion_loss_hand_example() {
        let x = Grid::<f64>::from_vec(1, 2, 2, vec![0.5, 0.0, 0.0, 1.0]).unwrap();
        let xh = Grid::<f64>::zeros(1, 2, 2);
        let mask = LesionMask::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(lesion_loss(&x, &xh, &mask).unwrap(), 0.25);
        assert_eq!(lesion_loss(&x, &xh, &LesionMask::empty(2, 2)).unwrap(), 0.0);
        let bad = LesionMask::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(lesion_loss(&x, &xh, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let b = total_loss(1.0, 2.0, 3.0, &w);
        assert!((b.total - 1.08).abs() < 1e-15);
        assert_eq!(total_loss(1.5, 2.0, 3.0, &LossWeights::ZERO).total, 1.5);
        let t = |ll: f64| total_loss(1.0, 2.0, 3.0, &LossWeights::new(0.01, ll)).total;
        assert!(((t(0.04) - t(0.0)) - 2.0 * (t(0.02) - t(0.0))).abs() < 1e-15);
        assert!(LossWeights::new(-0.1, 0.0).validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = rand_grid(2, 3, 3, 4);
        let xh = rand_grid(2, 3, 3, 5);
        let mask = rand_mask(3, 3, 6);
        let area = mask.area() * 2;
        let gi = image_loss_grad(&x, &xh, 1.0);
        let gl = lesion_loss_grad(&x, &xh, &mask, area, 1.0);
        let ge = latent_loss_grad(&x, &xh, 1.0);
        let h = 1e-6;
        for i in 0..xh.data.len() {
            let mut p = xh.clone();
            let mut m = xh.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd_i = (image_loss(&x, &p).unwrap() - image_loss(&x, &m).unwrap()) / (2.0 * h);
            let fd_l = (lesion_loss(&x, &p, &mask).unwrap() - lesion_loss(&x, &m, &mask).unwrap()) / (2.0 * h);
            let fd_e = (latent_loss(&x, &p).unwrap() - latent_loss(&x, &m).unwrap()) / (2.0 * h);
            for (fd, an) in [(fd_i, gi.data[i]), (fd_l, gl.data[i]), (fd_e, ge.data[i])] {
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-9, "{fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn full_mask_equals_image_loss(seed in any::<u64>(), c in 1usize..3, h in 1usize..6, w in 1usize..6) {
            let x = rand_grid(c, h, w, seed);
            let xh = rand_grid(c, h, w, seed ^ 1);
            let full = LesionMask::full(h, w);
            prop_assert_eq!(lesion_loss(&x, &xh, &full).unwrap(), image_loss(&x, &xh).unwrap());
        }

        #[test]
        fn outside_mask_perturbation_is_invisible(seed in any::<u64>(), bump in -10.0f64..10.0) {
            let x = rand_grid(2, 4, 4, seed);
            let xh = rand_grid(2, 4, 4, seed ^ 2);
            let mask = rand_mask(4, 4, seed);
            let before = lesion_loss(&x, &xh, &mask).unwrap();
            let mut moved = xh.clone();
            for ch in 0..2 {
                for i in 0..16 {
                    if mask.data[i] == 0.0 {
                        moved.plane_mut(ch)[i] += bump;
                    }
                }
            }
            prop_assert_eq!(before.to_bits(), lesion_loss(&x, &moved, &mask).unwrap().to_bits());
        }

        #[test]
        fn losses_are_non_negative(seed in any::<u64>()) {
            let x = rand_grid(2, 3, 3, seed);
            let xh = rand_grid(2, 3, 3, seed ^ 3);
            let mask = rand_mask(3, 3, seed);
            prop_assert!(image_loss(&x, &xh).unwrap() >= 0.0);
            prop_assert!(lesion_loss(&x, &xh, &mask).unwrap() >= 0.0);
            prop_assert!(latent_loss(&x, &xh).unwrap() >= 0.0);
        }
    }
}
