//! Convolutional encoder/decoder compressing images 4× per spatial axis,
//! with an optional vector-quantized bottleneck.
//!
//! Latents handed to the diffusion model are multiplied by
//! `latent_scale` (1 / std of the training encodings), and [`Autoencoder::decode`]
//! divides it back out before the decoder runs.

use std::ops::Range;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::exec::Exec;
use crate::grid::{Grid, ImageSlice, LatentGrid};
use crate::nn::{Conv2d, Init, Layout, Op, Real, Seq, SeqTrace, Slot};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;

/// Spatial compression per axis.
pub const DOWNSAMPLE_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Widths at full and half resolution.
    pub widths: [usize; 2],
    pub vq: bool,
    pub codebook_size: usize,
    pub commitment_beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub log_every: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_channels: 2,
            latent_channels: 4,
            widths: [16, 32],
            vq: false,
            codebook_size: 256,
            commitment_beta: 0.25,
            steps: 400,
            batch_size: 8,
            optimizer: AdamWConfig {
                learning_rate: 2e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            log_every: 1,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("autoencoder.{name}");
        if self.image_channels == 0 {
            return Err(Error::config(f("image_channels"), "must be positive"));
        }
        if self.latent_channels == 0 {
            return Err(Error::config(f("latent_channels"), "must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config(f("widths"), "all widths must be positive"));
        }
        if self.vq && self.codebook_size == 0 {
            return Err(Error::config(f("codebook_size"), "must be positive when vq is enabled"));
        }
        if !(self.commitment_beta >= 0.0 && self.commitment_beta.is_finite()) {
            return Err(Error::config(f("commitment_beta"), "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config(f("log_every"), "must be positive"));
        }
        self.optimizer.validate("autoencoder.optimizer")
    }
}

/// Network structure: parameter layout plus the two op stacks.
///
/// Parameters are laid out encoder, codebook, decoder, so the decoder
/// occupies one contiguous range.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderArch {
    pub config: AutoencoderConfig,
    pub layout: Layout,
    encoder: Seq,
    decoder: Seq,
    codebook: Option<Slot>,
    decoder_range: Range<usize>,
}

/// Activations kept from a decoder forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct DecodeTape<T> {
    indices: Option<Vec<usize>>,
    seq: SeqTrace<T>,
}

impl<T: Clone> DecodeTape<T> {
    pub fn output(&self) -> &Grid<T> {
        self.seq.output()
    }
}

impl AutoencoderArch {
    pub fn new(config: &AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let (m, c) = (config.image_channels, config.latent_channels);
        let [w0, w1] = config.widths;
        let mut layout = Layout::new();
        let mut encoder = Seq::default();
        let conv = |l: &mut Layout, name: &str, cin, cout, stride| Op::Conv(Conv2d::new(l, name, cin, cout, 3, stride));
        encoder.push(conv(&mut layout, "encoder.conv_in", m, w0, 1));
        encoder.push(Op::Silu);
        encoder.push(conv(&mut layout, "encoder.down0", w0, w0, 2));
        encoder.push(Op::Silu);
        encoder.push(conv(&mut layout, "encoder.down1", w0, w1, 2));
        encoder.push(Op::Silu);
        encoder.push(conv(&mut layout, "encoder.mid", w1, w1, 1));
        encoder.push(Op::Silu);
        encoder.push(conv(&mut layout, "encoder.conv_out", w1, c, 1));

        let codebook = config
            .vq
            .then(|| layout.add("codebook", &[config.codebook_size, c], Init::Const(0.0)));

        let start = layout.len();
        let mut decoder = Seq::default();
        decoder.push(conv(&mut layout, "decoder.conv_in", c, w1, 1));
        decoder.push(Op::Silu);
        decoder.push(Op::Upsample2);
        decoder.push(conv(&mut layout, "decoder.up0", w1, w0, 1));
        decoder.push(Op::Silu);
        decoder.push(Op::Upsample2);
        decoder.push(conv(&mut layout, "decoder.up1", w0, w0, 1));
        decoder.push(Op::Silu);
        decoder.push(conv(&mut layout, "decoder.conv_out", w0, m, 1));
        decoder.push(Op::Tanh);
        let decoder_range = start..layout.len();

        Ok(Self {
            config: config.clone(),
            layout,
            encoder,
            decoder,
            codebook,
            decoder_range,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    pub fn decoder_range(&self) -> Range<usize> {
        self.decoder_range.clone()
    }

    pub fn codebook_slot(&self) -> Option<Slot> {
        self.codebook
    }

    pub fn check_image<T>(&self, x: &Grid<T>) -> Result<()> {
        if x.c != self.config.image_channels {
            return Err(arg_err!(
                "encoder expects {} image channels, got {}",
                self.config.image_channels,
                x.c
            ));
        }
        if x.h == 0 || x.w == 0 || !x.h.is_multiple_of(DOWNSAMPLE_FACTOR) || !x.w.is_multiple_of(DOWNSAMPLE_FACTOR) {
            return Err(arg_err!(
                "image dims {}×{} must be positive and divisible by {DOWNSAMPLE_FACTOR}",
                x.h,
                x.w
            ));
        }
        Ok(())
    }

    pub fn check_latent<T>(&self, z: &Grid<T>) -> Result<()> {
        if z.c != self.config.latent_channels {
            return Err(arg_err!(
                "decoder expects {} latent channels, got {}",
                self.config.latent_channels,
                z.c
            ));
        }
        Ok(())
    }

    /// Unscaled encoder output.
    pub fn encode_raw<T: Real>(&self, p: &[T], x: &Grid<T>) -> Grid<T> {
        self.encoder.forward(p, x)
    }

    pub fn encode_trace<T: Real>(&self, p: &[T], x: &Grid<T>) -> SeqTrace<T> {
        self.encoder.forward_trace(p, x)
    }

    pub fn encode_backward<T: Real>(&self, p: &[T], trace: &SeqTrace<T>, dz: Grid<T>, grads: Option<&mut [T]>) -> Grid<T> {
        self.encoder.backward(p, trace, dz, grads)
    }

    /// Decodes an unscaled latent, quantizing first when VQ is enabled.
    pub fn decode_tape<T: Real>(&self, p: &[T], z_raw: &Grid<T>) -> DecodeTape<T> {
        match self.codebook {
            Some(slot) => {
                let (q, idx) = quantize(z_raw, slot.of(p)).expect("codebook shape checked at construction");
                DecodeTape {
                    indices: Some(idx),
                    seq: self.decoder.forward_trace(p, &q),
                }
            }
            None => DecodeTape {
                indices: None,
                seq: self.decoder.forward_trace(p, z_raw),
            },
        }
    }

    /// Gradient w.r.t. the unscaled latent. Quantization passes the
    /// gradient straight through.
    pub fn decode_backward<T: Real>(&self, p: &[T], tape: &DecodeTape<T>, dx: Grid<T>, grads: Option<&mut [T]>) -> Grid<T> {
        self.decoder.backward(p, &tape.seq, dx, grads)
    }

    pub fn decode_raw<T: Real>(&self, p: &[T], z_raw: &Grid<T>) -> Grid<T> {
        match self.codebook {
            Some(slot) => {
                let (q, _) = quantize(z_raw, slot.of(p)).expect("codebook shape checked at construction");
                self.decoder.forward(p, &q)
            }
            None => self.decoder.forward(p, z_raw),
        }
    }

    /// Per-sample reconstruction objective and its parameter gradient:
    /// mean |x̂ − x| plus, with VQ, the codebook and commitment terms.
    pub fn loss_and_grad<T: Real>(&self, p: &[T], x: &Grid<T>) -> (ReconTerms, Vec<T>) {
        let mut grads = vec![T::zero(); p.len()];
        let enc = self.encode_trace(p, x);
        let z = enc.output().clone();
        let tape = self.decode_tape(p, &z);
        let x_hat = tape.output();
        let n = x.data.len() as f64;
        let mut recon = 0.0;
        let mut dx = Grid::zeros(x.c, x.h, x.w);
        for ((d, &a), &b) in dx.data.iter_mut().zip(&x_hat.data).zip(&x.data) {
            let diff = (a - b).f64();
            recon += diff.abs();
            *d = if diff > 0.0 {
                T::cst(1.0 / n)
            } else if diff < 0.0 {
                T::cst(-1.0 / n)
            } else {
                T::zero()
            };
        }
        recon /= n;
        let mut dz = self.decode_backward(p, &tape, dx, Some(&mut grads));
        let mut vq = 0.0;
        if let (Some(slot), Some(idx)) = (self.codebook, &tape.indices) {
            let beta = self.config.commitment_beta;
            let c = z.c;
            let hw = z.plane_len();
            let nz = z.data.len() as f64;
            let cb = slot.of(p);
            let mut sq = 0.0;
            let gcb = slot.of_mut(&mut grads);
            for (pos, &k) in idx.iter().enumerate() {
                for ch in 0..c {
                    let zi = z.data[ch * hw + pos];
                    let qi = cb[k * c + ch];
                    let diff = (zi - qi).f64();
                    sq += diff * diff;
                    gcb[k * c + ch] += T::cst(2.0 * -diff / nz);
                    dz.data[ch * hw + pos] += T::cst(2.0 * beta * diff / nz);
                }
            }
            vq = (1.0 + beta) * sq / nz;
        }
        self.encode_backward(p, &enc, dz, Some(&mut grads));
        (ReconTerms { recon, vq }, grads)
    }
}

/// Loss terms of one reconstruction step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconTerms {
    pub recon: f64,
    pub vq: f64,
}

/// Replaces each latent vector (one per spatial position) by its nearest
/// codebook row; ties go to the lowest index. Rows are `z.c` wide.
pub fn quantize<T: Real>(z: &Grid<T>, codebook: &[T]) -> Result<(Grid<T>, Vec<usize>)> {
    let c = z.c;
    if c == 0 || codebook.is_empty() || !codebook.len().is_multiple_of(c) {
        return Err(arg_err!(
            "codebook of {} values cannot hold rows of width {c}",
            codebook.len()
        ));
    }
    let k = codebook.len() / c;
    let hw = z.plane_len();
    let mut q = Grid::zeros(c, z.h, z.w);
    let mut idx = Vec::with_capacity(hw);
    for pos in 0..hw {
        let mut best = (f64::INFINITY, 0usize);
        for j in 0..k {
            let mut d = 0.0;
            for ch in 0..c {
                let diff = (z.data[ch * hw + pos] - codebook[j * c + ch]).f64();
                d += diff * diff;
            }
            if d < best.0 {
                best = (d, j);
            }
        }
        idx.push(best.1);
        for ch in 0..c {
            q.data[ch * hw + pos] = codebook[best.1 * c + ch];
        }
    }
    Ok((q, idx))
}

/// A trained autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub arch: AutoencoderArch,
    pub params: Vec<f32>,
    pub latent_scale: f32,
}

impl Autoencoder {
    pub fn new(arch: AutoencoderArch, params: Vec<f32>, latent_scale: f32) -> Result<Self> {
        if params.len() != arch.n_params() {
            return Err(arg_err!(
                "autoencoder expects {} parameters, got {}",
                arch.n_params(),
                params.len()
            ));
        }
        Ok(Self {
            arch,
            params,
            latent_scale,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.arch.config
    }

    pub fn latent_channels(&self) -> usize {
        self.arch.config.latent_channels
    }

    pub fn encode(&self, x: &ImageSlice) -> Result<LatentGrid> {
        self.arch.check_image(x)?;
        let mut z = self.arch.encode_raw(&self.params, x);
        z.data.iter_mut().for_each(|v| *v *= self.latent_scale);
        Ok(z)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<ImageSlice> {
        self.arch.check_latent(z)?;
        Ok(self.arch.decode_raw(&self.params, &self.unscale(z)))
    }

    /// Decodes and keeps the activations needed by [`Self::decode_vjp`].
    pub fn decode_tape(&self, z: &LatentGrid) -> Result<DecodeTape<f32>> {
        self.arch.check_latent(z)?;
        Ok(self.arch.decode_tape(&self.params, &self.unscale(z)))
    }

    /// Pulls an image-space gradient back to the scaled latent. Decoder
    /// parameter gradients accumulate into `grads` when given.
    pub fn decode_vjp(&self, tape: &DecodeTape<f32>, dx: ImageSlice, grads: Option<&mut [f32]>) -> LatentGrid {
        let mut dz = self.arch.decode_backward(&self.params, tape, dx, grads);
        let inv = 1.0 / self.latent_scale;
        dz.data.iter_mut().for_each(|v| *v *= inv);
        dz
    }

    pub fn reconstruct(&self, x: &ImageSlice) -> Result<ImageSlice> {
        self.decode(&self.encode(x)?)
    }

    fn unscale(&self, z: &LatentGrid) -> LatentGrid {
        let inv = 1.0 / self.latent_scale;
        Grid {
            c: z.c,
            h: z.h,
            w: z.w,
            data: z.data.iter().map(|v| v * inv).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeLogRecord {
    pub step: usize,
    pub recon: f64,
    pub vq: f64,
    pub total: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct AeTraining {
    pub model: Autoencoder,
    pub log: Vec<AeLogRecord>,
    pub optimizer: AdamW,
}

/// Trains the autoencoder on `images` with L1 reconstruction (plus VQ
/// terms when enabled). Results depend only on (images, config, seed).
pub fn train_autoencoder(images: &[ImageSlice], config: &AutoencoderConfig, seed: u64, exec: Exec) -> Result<AeTraining> {
    if images.is_empty() {
        return Err(Error::config("autoencoder.dataset", "training set is empty"));
    }
    let arch = AutoencoderArch::new(config)?;
    for x in images {
        arch.check_image(x)?;
    }
    let mut params: Vec<f32> = arch.layout.init(seed);
    if let Some(slot) = arch.codebook_slot() {
        init_codebook(&arch, &mut params, slot, images, seed);
    }
    let mut opt = AdamW::new(params.len(), config.optimizer);
    let mut log = Vec::new();
    let start = Instant::now();
    let b = config.batch_size;
    for step in 0..config.steps {
        let batch = rng::batch_indices(images.len(), b, seed, step as u64);
        let results = exec.map(&batch, |&i| arch.loss_and_grad(&params, &images[i]));
        let mut grads = vec![0.0f32; params.len()];
        let mut terms = ReconTerms::default();
        let inv_b = 1.0 / b as f32;
        for (t, g) in &results {
            terms.recon += t.recon / b as f64;
            terms.vq += t.vq / b as f64;
            for (a, v) in grads.iter_mut().zip(g) {
                *a += v * inv_b;
            }
        }
        opt.update(&mut params, &grads);
        if step % config.log_every == 0 || step + 1 == config.steps {
            log.push(AeLogRecord {
                step,
                recon: terms.recon,
                vq: terms.vq,
                total: terms.recon + terms.vq,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }
    let latent_scale = latent_scale(&arch, &params, images, exec);
    Ok(AeTraining {
        model: Autoencoder::new(arch, params, latent_scale)?,
        log,
        optimizer: opt,
    })
}

/// Seeds the codebook with encoder outputs at randomly chosen positions.
fn init_codebook(arch: &AutoencoderArch, params: &mut [f32], slot: Slot, images: &[ImageSlice], seed: u64) {
    let c = arch.config.latent_channels;
    let k = arch.config.codebook_size;
    let mut vectors: Vec<f32> = Vec::new();
    for x in images.iter().take(64) {
        let z = arch.encode_raw(params, x);
        let hw = z.plane_len();
        for pos in 0..hw {
            vectors.extend((0..c).map(|ch| z.data[ch * hw + pos]));
        }
    }
    let n = vectors.len() / c;
    let mut r = rng::stream(&[seed, rng::tag::CODEBOOK]);
    let picks: Vec<usize> = if n >= k {
        index::sample(&mut r, n, k).into_vec()
    } else {
        (0..k).map(|j| j % n).collect()
    };
    let cb = slot.of_mut(params);
    for (j, &src) in picks.iter().enumerate() {
        for ch in 0..c {
            // small jitter keeps rows distinct when sources repeat
            let jitter = if n >= k { 0.0 } else { 1e-3 * rng::normal::<f32, _>(&mut r) };
            cb[j * c + ch] = vectors[src * c + ch] + jitter;
        }
    }
}

/// 1 / std of the encoder outputs over (up to 256 of) the training images.
fn latent_scale(arch: &AutoencoderArch, params: &[f32], images: &[ImageSlice], exec: Exec) -> f32 {
    let take = &images[..images.len().min(256)];
    let zs = exec.map(take, |x| arch.encode_raw(params, x));
    let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
    for z in &zs {
        for &v in &z.data {
            s += v as f64;
            s2 += (v as f64) * (v as f64);
            n += 1;
        }
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).max(0.0).sqrt();
    if std > 1e-8 {
        (1.0 / std) as f32
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, PhantomConfig};
    use proptest::prelude::*;

    fn tiny_config(vq: bool) -> AutoencoderConfig {
        AutoencoderConfig {
            image_channels: 2,
            latent_channels: 2,
            widths: [2, 3],
            vq,
            codebook_size: 8,
            ..Default::default()
        }
    }

    fn random_grid(c: usize, h: usize, w: usize, seed: u64) -> Grid<f64> {
        let mut r = rng::stream(&[seed]);
        Grid::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w)).unwrap()
    }

    #[test]
    fn shapes_and_saturation() {
        let arch = AutoencoderArch::new(&AutoencoderConfig::default()).unwrap();
        let ae = Autoencoder::new(arch.clone(), arch.layout.init(1), 1.0).unwrap();
        let x = random_grid(2, 64, 64, 3).cast::<f32>();
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), (4, 16, 16));
        assert_eq!(ae.encode(&x).unwrap(), z);
        assert!(z.is_finite());
        let mut big = z.clone();
        big.data.iter_mut().for_each(|v| *v *= 1e4);
        let y = ae.decode(&big).unwrap();
        assert_eq!(y.shape(), (2, 64, 64));
        assert!(y.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_shapes() {
        let arch = AutoencoderArch::new(&AutoencoderConfig::default()).unwrap();
        let ae = Autoencoder::new(arch.clone(), arch.layout.init(1), 1.0).unwrap();
        let err = ae.encode(&Grid::zeros(2, 62, 64)).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
        assert!(ae.decode(&Grid::zeros(3, 16, 16)).is_err());
    }

    #[test]
    fn decoder_is_a_contiguous_tail() {
        let arch = AutoencoderArch::new(&tiny_config(true)).unwrap();
        let r = arch.decoder_range();
        assert_eq!(r.end, arch.n_params());
        assert!(arch.codebook_slot().unwrap().range().end <= r.start);
        assert!(arch.n_params() <= 1000);
    }

    #[test]
    fn quantizer_basics() {
        let z = random_grid(3, 4, 4, 9);
        let (q, idx) = quantize(&z, &[0.5, -1.0, 2.0]).unwrap();
        assert!(idx.iter().all(|&i| i == 0));
        assert!(q.plane(1).iter().all(|&v| v == -1.0));

        let cb: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let exact = Grid::from_vec(3, 1, 1, vec![6.0, 7.0, 8.0]).unwrap();
        let (q, idx) = quantize(&exact, &cb).unwrap();
        assert_eq!((idx, q), (vec![2], exact));

        // equidistant from rows 0 and 1
        let mid = Grid::from_vec(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(quantize(&mid, &[0.0, 1.0]).unwrap().1, vec![0]);
        assert!(quantize(&mid, &[] as &[f64]).is_err());
    }

    proptest! {
        #[test]
        fn quantizer_matches_brute_force_and_is_idempotent(seed in 0u64..1000, k in 1usize..=64) {
            let z = random_grid(4, 5, 5, seed);
            let mut r = rng::stream(&[seed, 1]);
            let cb: Vec<f64> = rng::normal_vec(&mut r, k * 4);
            let (q, idx) = quantize(&z, &cb).unwrap();
            for pos in 0..25 {
                let dist = |j: usize| (0..4).map(|ch| (z.data[ch * 25 + pos] - cb[j * 4 + ch]).powi(2)).sum::<f64>();
                let best = (0..k).min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b))).unwrap();
                prop_assert_eq!(idx[pos], best);
            }
            prop_assert_eq!(quantize(&q, &cb).unwrap().0, q);
        }
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let arch = AutoencoderArch::new(&tiny_config(false)).unwrap();
        let p: Vec<f64> = arch.layout.init(5);
        let x = random_grid(2, 8, 8, 11).cast::<f64>();
        let x = Grid {
            data: x.data.iter().map(|v| v.tanh()).collect(),
            ..x
        };
        let (_, g) = arch.loss_and_grad(&p, &x);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let up = arch.loss_and_grad(&pp, &x).0.recon;
            pp[i] -= 2.0 * h;
            let dn = arch.loss_and_grad(&pp, &x).0.recon;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    fn phantom_images(n: usize, seed: u64) -> Vec<ImageSlice> {
        let cfg = PhantomConfig::default();
        (0..n).map(|i| generate_case(seed + i as u64, &cfg).unwrap().target).collect()
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let images = phantom_images(4, 100);
        let cfg = AutoencoderConfig {
            steps: 3,
            batch_size: 2,
            ..tiny_config(true)
        };
        let a = train_autoencoder(&images, &cfg, 7, Exec::Sequential).unwrap();
        let b = train_autoencoder(&images, &cfg, 7, Exec::Parallel).unwrap();
        assert_eq!(crate::nn::checksum(&a.model.params), crate::nn::checksum(&b.model.params));
        assert_eq!(a.model.latent_scale, b.model.latent_scale);
        assert!(train_autoencoder(&[], &cfg, 7, Exec::Sequential).is_err());
    }
}
