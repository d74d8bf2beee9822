//! Time-conditional UNet ε_θ(z_t, t, c̃) and the spatial rescaler that
//! brings the source stack down to latent resolution.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::grid::{Grid, ImageSlice, LatentGrid};
use crate::nn::{silu, silu_backward, upsample2, upsample2_backward, Conv2d, GroupNorm, GroupNormCache, Layout, Linear, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub source_channels: usize,
    /// Condition channels k after the 1×1 mixing; defaults to the source count.
    pub cond_channels: Option<usize>,
    pub base_width: usize,
    /// Width multipliers of the three resolution levels.
    pub channel_mult: [usize; 3],
    pub groups: usize,
    pub time_embed_dim: usize,
    /// Reserved; attention blocks are not implemented.
    pub attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            source_channels: 5,
            cond_channels: None,
            base_width: 32,
            channel_mult: [1, 2, 2],
            groups: 8,
            time_embed_dim: 64,
            attention: false,
        }
    }
}

impl DenoiserConfig {
    pub fn k(&self) -> usize {
        self.cond_channels.unwrap_or(self.source_channels)
    }

    pub fn widths(&self) -> [usize; 3] {
        self.channel_mult.map(|m| m * self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("denoiser.{name}");
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("source_channels", self.source_channels),
            ("cond_channels", self.k()),
            ("base_width", self.base_width),
            ("groups", self.groups),
            ("time_embed_dim", self.time_embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(f(name), "must be positive"));
            }
        }
        if self.channel_mult.contains(&0) {
            return Err(Error::config(f("channel_mult"), "multipliers must be positive"));
        }
        if !self.base_width.is_multiple_of(2) {
            return Err(Error::config(f("base_width"), "must be even (sinusoidal embedding pairs)"));
        }
        if self.attention {
            return Err(Error::config(f("attention"), "attention blocks are not supported"));
        }
        Ok(())
    }
}

/// Largest group count ≤ `max` dividing `c`.
fn group_count(c: usize, max: usize) -> usize {
    (1..=max.min(c)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// Bilinear resize with half-pixel centers (no antialiasing); shrinking only.
pub fn bilinear_resize<T: Real>(x: &Grid<T>, h: usize, w: usize) -> Result<Grid<T>> {
    if h == 0 || w == 0 || h > x.h || w > x.w {
        return Err(arg_err!(
            "rescaler only downsamples: cannot map {}×{} to {h}×{w}",
            x.h,
            x.w
        ));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, T)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, T::cst(src - i0 as f64))
            })
            .collect()
    };
    let ys = axis(x.h, h);
    let xs = axis(x.w, w);
    let mut out = Grid::zeros(x.c, h, w);
    for ch in 0..x.c {
        let plane = x.plane(ch);
        let dst = out.plane_mut(ch);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let a = plane[y0 * x.w + x0];
                let b = plane[y0 * x.w + x1];
                let c = plane[y1 * x.w + x0];
                let d = plane[y1 * x.w + x1];
                let top = a + (b - a) * lx;
                let bot = c + (d - c) * lx;
                dst[oy * w + ox] = top + (bot - top) * ly;
            }
        }
    }
    Ok(out)
}

/// Sinusoidal embedding of a timestep, `dim` values (sines then cosines).
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = T::cst(a.sin());
        out[half + i] = T::cst(a.cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<T> {
    x: Grid<T>,
    gn1: GroupNormCache<T>,
    h1: Grid<T>,
    a1: Grid<T>,
    gn2: GroupNormCache<T>,
    h2: Grid<T>,
    a2: Grid<T>,
}

fn map_grid<T: Real>(g: &Grid<T>, f: impl Fn(&[T]) -> Vec<T>) -> Grid<T> {
    Grid {
        c: g.c,
        h: g.h,
        w: g.w,
        data: f(&g.data),
    }
}

impl ResBlock {
    fn new(l: &mut Layout, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Self {
        Self {
            gn1: GroupNorm::new(l, &format!("{name}.norm1"), cin, group_count(cin, groups)),
            conv1: Conv2d::new(l, &format!("{name}.conv1"), cin, cout, 3, 1),
            temb: Linear::new(l, &format!("{name}.temb"), tdim, cout),
            gn2: GroupNorm::new(l, &format!("{name}.norm2"), cout, group_count(cout, groups)),
            conv2: Conv2d::new(l, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(l, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    /// `s` is SiLU of the shared time embedding.
    fn forward<T: Real>(&self, p: &[T], x: Grid<T>, s: &[T]) -> (Grid<T>, ResCache<T>) {
        let (h1, gn1) = self.gn1.forward(p, &x);
        let a1 = map_grid(&h1, silu);
        let mut c1 = self.conv1.forward(p, &a1);
        let proj = self.temb.forward(p, s);
        for (ch, &b) in proj.iter().enumerate() {
            c1.plane_mut(ch).iter_mut().for_each(|v| *v += b);
        }
        let (h2, gn2) = self.gn2.forward(p, &c1);
        let a2 = map_grid(&h2, silu);
        let mut out = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(sk) => out.add_assign(&sk.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (
            out,
            ResCache {
                x,
                gn1,
                h1,
                a1,
                gn2,
                h2,
                a2,
            },
        )
    }

    /// Returns the input gradient; the time-embedding gradient is added to `ds`.
    fn backward<T: Real>(
        &self,
        p: &[T],
        c: &ResCache<T>,
        s: &[T],
        dout: &Grid<T>,
        ds: &mut [T],
        mut grads: Option<&mut [T]>,
    ) -> Grid<T> {
        let da2 = self.conv2.backward(p, &c.a2, dout, grads.as_deref_mut());
        let dh2 = Grid {
            data: silu_backward(&c.h2.data, &da2.data),
            ..da2
        };
        let dc1 = self.gn2.backward(p, &c.gn2, &dh2, grads.as_deref_mut());
        let dproj: Vec<T> = (0..dc1.c).map(|ch| dc1.plane(ch).iter().copied().sum()).collect();
        let dsv = self.temb.backward(p, s, &dproj, grads.as_deref_mut());
        for (a, b) in ds.iter_mut().zip(dsv) {
            *a += b;
        }
        let da1 = self.conv1.backward(p, &c.a1, &dc1, grads.as_deref_mut());
        let dh1 = Grid {
            data: silu_backward(&c.h1.data, &da1.data),
            ..da1
        };
        let mut dx = self.gn1.backward(p, &c.gn1, &dh1, grads.as_deref_mut());
        match &self.skip {
            Some(sk) => dx.add_assign(&sk.backward(p, &c.x, dout, grads)),
            None => dx.add_assign(dout),
        }
        dx
    }
}

/// The conditional UNet plus rescaler, parameters laid out rescaler first.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserArch {
    pub config: DenoiserConfig,
    pub layout: Layout,
    rescaler: Conv2d,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res0: ResBlock,
    down0: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    res2: ResBlock,
    mid: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Activations of one forward pass, consumed by [`DenoiserArch::backward`].
pub struct DenoiserTape<T> {
    resized: Grid<T>,
    emb: Vec<T>,
    e1: Vec<T>,
    a1: Vec<T>,
    temb: Vec<T>,
    s: Vec<T>,
    x_in: Grid<T>,
    r0: ResCache<T>,
    s0: Grid<T>,
    r1: ResCache<T>,
    s1: Grid<T>,
    r2: ResCache<T>,
    rm: ResCache<T>,
    ru1: ResCache<T>,
    ru0: ResCache<T>,
    gn_out: GroupNormCache<T>,
    g_out: Grid<T>,
    a_out: Grid<T>,
}

impl DenoiserArch {
    pub fn new(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (c, k, n) = (config.latent_channels, config.k(), config.source_channels);
        let [w0, w1, w2] = config.widths();
        let (td, g) = (config.time_embed_dim, config.groups);
        let l = &mut Layout::new();
        let rescaler = Conv2d::new(l, "rescaler", n, k, 1, 1);
        let time1 = Linear::new(l, "time.linear1", config.base_width, td);
        let time2 = Linear::new(l, "time.linear2", td, td);
        let conv_in = Conv2d::new(l, "conv_in", c + k, w0, 3, 1);
        let res0 = ResBlock::new(l, "down0.res", w0, w0, td, g);
        let down0 = Conv2d::new(l, "down0.downsample", w0, w0, 3, 2);
        let res1 = ResBlock::new(l, "down1.res", w0, w1, td, g);
        let down1 = Conv2d::new(l, "down1.downsample", w1, w1, 3, 2);
        let res2 = ResBlock::new(l, "down2.res", w1, w2, td, g);
        let mid = ResBlock::new(l, "mid.res", w2, w2, td, g);
        let up1 = ResBlock::new(l, "up1.res", w2 + w1, w1, td, g);
        let up0 = ResBlock::new(l, "up0.res", w1 + w0, w0, td, g);
        let norm_out = GroupNorm::new(l, "norm_out", w0, group_count(w0, g));
        let conv_out = Conv2d::new(l, "conv_out", w0, c, 3, 1);
        Ok(Self {
            config: config.clone(),
            layout: l.clone(),
            rescaler,
            time1,
            time2,
            conv_in,
            res0,
            down0,
            res1,
            down1,
            res2,
            mid,
            up1,
            up0,
            norm_out,
            conv_out,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    /// Learned 1×1 mixing of an already resized source stack.
    pub fn mix_condition<T: Real>(&self, p: &[T], resized: &Grid<T>) -> Result<Grid<T>> {
        if resized.c != self.config.source_channels {
            return Err(arg_err!(
                "rescaler expects {} source channels, got {}",
                self.config.source_channels,
                resized.c
            ));
        }
        Ok(self.rescaler.forward(p, resized))
    }

    /// F(c): bilinear resize to `(h, w)` then 1×1 channel mixing.
    pub fn rescale_condition<T: Real>(&self, p: &[T], source: &Grid<T>, target: (usize, usize)) -> Result<Grid<T>> {
        let resized = bilinear_resize(source, target.0, target.1)?;
        self.mix_condition(p, &resized)
    }

    fn check_inputs<T>(&self, z_t: &Grid<T>, t: usize, cond: &Grid<T>) -> Result<()> {
        if z_t.c != self.config.latent_channels {
            return Err(arg_err!(
                "denoiser expects {} latent channels, got {}",
                self.config.latent_channels,
                z_t.c
            ));
        }
        if (z_t.h, z_t.w) != (cond.h, cond.w) {
            return Err(arg_err!(
                "latent {}×{} and condition {}×{} differ spatially",
                z_t.h,
                z_t.w,
                cond.h,
                cond.w
            ));
        }
        if z_t.h == 0 || !z_t.h.is_multiple_of(4) || !z_t.w.is_multiple_of(4) {
            return Err(arg_err!("latent dims {}×{} must be divisible by 4", z_t.h, z_t.w));
        }
        if t == 0 {
            return Err(arg_err!("timestep must be at least 1"));
        }
        Ok(())
    }

    /// ε_θ(z_t, t, c̃) for an already rescaled condition.
    pub fn predict_eps<T: Real>(&self, p: &[T], z_t: &Grid<T>, t: usize, cond: &Grid<T>) -> Result<Grid<T>> {
        if cond.c != self.config.k() {
            return Err(arg_err!(
                "denoiser expects {} condition channels, got {}",
                self.config.k(),
                cond.c
            ));
        }
        self.check_inputs(z_t, t, cond)?;
        Ok(self.unet(p, z_t, t, cond.clone(), None).0)
    }

    /// Forward pass from the resized source, keeping activations.
    pub fn forward_tape<T: Real>(&self, p: &[T], z_t: &Grid<T>, t: usize, resized: &Grid<T>) -> Result<(Grid<T>, DenoiserTape<T>)> {
        let cond = self.mix_condition(p, resized)?;
        self.check_inputs(z_t, t, &cond)?;
        let (eps, tape) = self.unet(p, z_t, t, cond, Some(resized.clone()));
        Ok((eps, tape.expect("tape requested")))
    }

    fn unet<T: Real>(&self, p: &[T], z_t: &Grid<T>, t: usize, cond: Grid<T>, keep: Option<Grid<T>>) -> (Grid<T>, Option<DenoiserTape<T>>) {
        let emb = timestep_embedding::<T>(t, self.config.base_width);
        let e1 = self.time1.forward(p, &emb);
        let a1 = silu(&e1);
        let temb = self.time2.forward(p, &a1);
        let s = silu(&temb);

        let x_in = Grid::concat(z_t, &cond).expect("spatial dims checked");
        let h = self.conv_in.forward(p, &x_in);
        let (s0, r0) = self.res0.forward(p, h, &s);
        let d0 = self.down0.forward(p, &s0);
        let (s1, r1) = self.res1.forward(p, d0, &s);
        let d1 = self.down1.forward(p, &s1);
        let (m0, r2) = self.res2.forward(p, d1, &s);
        let (m1, rm) = self.mid.forward(p, m0, &s);
        let cat1 = Grid::concat(&upsample2(&m1), &s1).expect("matching dims");
        let (o1, ru1) = self.up1.forward(p, cat1, &s);
        let cat0 = Grid::concat(&upsample2(&o1), &s0).expect("matching dims");
        let (o0, ru0) = self.up0.forward(p, cat0, &s);
        let (g_out, gn_out) = self.norm_out.forward(p, &o0);
        let a_out = map_grid(&g_out, silu);
        let eps = self.conv_out.forward(p, &a_out);
        let tape = keep.map(|resized| DenoiserTape {
            resized,
            emb,
            e1,
            a1,
            temb,
            s,
            x_in,
            r0,
            s0,
            r1,
            s1,
            r2,
            rm,
            ru1,
            ru0,
            gn_out,
            g_out,
            a_out,
        });
        (eps, tape)
    }

    /// Accumulates parameter gradients of a loss with gradient `deps` at the
    /// output; returns the gradient w.r.t. z_t.
    pub fn backward<T: Real>(&self, p: &[T], tape: &DenoiserTape<T>, deps: &Grid<T>, grads: &mut [T]) -> Grid<T> {
        let g = &mut *grads;
        let [w0, w1, _] = self.config.widths();
        let s = &tape.s;
        let mut ds = vec![T::zero(); s.len()];

        let da = self.conv_out.backward(p, &tape.a_out, deps, Some(g));
        let dg = Grid {
            data: silu_backward(&tape.g_out.data, &da.data),
            ..da
        };
        let do0 = self.norm_out.backward(p, &tape.gn_out, &dg, Some(g));
        let dcat0 = self.up0.backward(p, &tape.ru0, s, &do0, &mut ds, Some(g));
        let (du0, ds0_skip) = dcat0.split(dcat0.c - w0);
        let do1 = upsample2_backward(&du0);
        let dcat1 = self.up1.backward(p, &tape.ru1, s, &do1, &mut ds, Some(g));
        let (du1, ds1_skip) = dcat1.split(dcat1.c - w1);
        let dm1 = upsample2_backward(&du1);
        let dm0 = self.mid.backward(p, &tape.rm, s, &dm1, &mut ds, Some(g));
        let dd1 = self.res2.backward(p, &tape.r2, s, &dm0, &mut ds, Some(g));
        let mut ds1 = self.down1.backward(p, &tape.s1, &dd1, Some(g));
        ds1.add_assign(&ds1_skip);
        let dd0 = self.res1.backward(p, &tape.r1, s, &ds1, &mut ds, Some(g));
        let mut ds0 = self.down0.backward(p, &tape.s0, &dd0, Some(g));
        ds0.add_assign(&ds0_skip);
        let dh = self.res0.backward(p, &tape.r0, s, &ds0, &mut ds, Some(g));
        let dx_in = self.conv_in.backward(p, &tape.x_in, &dh, Some(g));
        let (dz, dcond) = dx_in.split(self.config.latent_channels);
        self.rescaler.backward(p, &tape.resized, &dcond, Some(g));

        let dtemb = silu_backward(&tape.temb, &ds);
        let da1 = self.time2.backward(p, &tape.a1, &dtemb, Some(g));
        let de1 = silu_backward(&tape.e1, &da1);
        self.time1.backward(p, &tape.emb, &de1, Some(g));
        dz
    }
}

/// A denoiser with concrete single-precision parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub params: Vec<f32>,
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, params: Vec<f32>) -> Result<Self> {
        if params.len() != arch.n_params() {
            return Err(arg_err!(
                "denoiser expects {} parameters, got {}",
                arch.n_params(),
                params.len()
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let arch = DenoiserArch::new(config)?;
        let params = arch.layout.init(seed);
        Ok(Self { arch, params })
    }

    pub fn rescale_condition(&self, source: &ImageSlice, target: (usize, usize)) -> Result<Grid<f32>> {
        self.arch.rescale_condition(&self.params, source, target)
    }

    pub fn predict_eps(&self, z_t: &LatentGrid, t: usize, cond: &Grid<f32>) -> Result<LatentGrid> {
        self.arch.predict_eps(&self.params, z_t, t, cond)
    }
}
