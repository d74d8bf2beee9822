use super::{Init, Layout, Real, Slot};
use crate::grid::Grid;

/// 2-D convolution with square kernel, zero padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv2d {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_gain(layout, name, cin, cout, k, stride, 1.0)
    }

    /// `gain` scales the fan-in normal initialization.
    pub fn with_gain(
        layout: &mut Layout,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let weight = layout.add(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::Normal(gain / fan_in.sqrt()),
        );
        let bias = layout.add(format!("{name}.bias"), &[cout], Init::Const(0.0));
        Self {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &Grid<T>, ho: usize, wo: usize) -> Vec<T> {
        let k = self.k;
        let n = ho * wo;
        let mut col = vec![T::zero(); self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Grid<T> {
        let k = self.k;
        let n = ho * wo;
        let mut dx = Grid::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = dx.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Grid<T>) -> Grid<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let n = ho * wo;
        let mut out = Grid::zeros(self.cout, ho, wo);
        for (o, b) in self.bias.of(p).iter().enumerate() {
            out.plane_mut(o).fill(*b);
        }
        let kk = self.cin * self.k * self.k;
        if self.is_pointwise() {
            T::gemm(self.cout, kk, n, self.weight.of(p), false, &x.data, false, T::one(), &mut out.data);
        } else {
            let col = self.im2col(x, ho, wo);
            T::gemm(self.cout, kk, n, self.weight.of(p), false, &col, false, T::one(), &mut out.data);
        }
        out
    }

    /// Returns the input gradient; accumulates parameter gradients into
    /// `grads` when given.
    pub fn backward<T: Real>(&self, p: &[T], x: &Grid<T>, dy: &Grid<T>, grads: Option<&mut [T]>) -> Grid<T> {
        let (ho, wo) = (dy.h, dy.w);
        let n = ho * wo;
        let kk = self.cin * self.k * self.k;
        let owned;
        let col: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, ho, wo);
            &owned
        };
        if let Some(g) = grads {
            T::gemm(self.cout, n, kk, &dy.data, false, col, true, T::one(), self.weight.of_mut(g));
            for (o, gb) in self.bias.of_mut(g).iter_mut().enumerate() {
                *gb += dy.plane(o).iter().copied().sum::<T>();
            }
        }
        let mut dcol = vec![T::zero(); kk * n];
        T::gemm(kk, self.cout, n, self.weight.of(p), true, &dy.data, false, T::zero(), &mut dcol);
        if self.is_pointwise() {
            Grid {
                c: self.cin,
                h: x.h,
                w: x.w,
                data: dcol,
            }
        } else {
            self.col2im(&dcol, x.h, x.w, ho, wo)
        }
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub eps: f64,
    pub gamma: Slot,
    pub beta: Slot,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    xhat: Grid<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new(layout: &mut Layout, name: &str, c: usize, groups: usize) -> Self {
        assert!(groups > 0 && c.is_multiple_of(groups), "{c} channels not divisible into {groups} groups");
        let gamma = layout.add(format!("{name}.gamma"), &[c], Init::Const(1.0));
        let beta = layout.add(format!("{name}.beta"), &[c], Init::Const(0.0));
        Self {
            c,
            groups,
            eps: 1e-5,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Grid<T>) -> (Grid<T>, GroupNormCache<T>) {
        let cpg = self.c / self.groups;
        let span = cpg * x.plane_len();
        let nf = T::cst(span as f64);
        let gamma = self.gamma.of(p);
        let beta = self.beta.of(p);
        let mut xhat = x.clone();
        let mut y = Grid::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        let pl = x.plane_len();
        for g in 0..self.groups {
            let chunk = &mut xhat.data[g * span..(g + 1) * span];
            let mean = chunk.iter().copied().sum::<T>() / nf;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::cst(self.eps)).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
            for ci in g * cpg..(g + 1) * cpg {
                let (ga, be) = (gamma[ci], beta[ci]);
                let src = &xhat.data[ci * pl..(ci + 1) * pl];
                for (d, &s) in y.plane_mut(ci).iter_mut().zip(src) {
                    *d = s * ga + be;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &GroupNormCache<T>,
        dy: &Grid<T>,
        grads: Option<&mut [T]>,
    ) -> Grid<T> {
        let pl = dy.plane_len();
        let cpg = self.c / self.groups;
        let span = cpg * pl;
        let nf = T::cst(span as f64);
        let gamma = self.gamma.of(p);
        if let Some(g) = grads {
            for ci in 0..self.c {
                let d = dy.plane(ci);
                let xh = cache.xhat.plane(ci);
                let dg: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                let db: T = d.iter().copied().sum();
                self.gamma.of_mut(g)[ci] += dg;
                self.beta.of_mut(g)[ci] += db;
            }
        }
        let mut dx = Grid::zeros(dy.c, dy.h, dy.w);
        let mut dxhat = vec![T::zero(); span];
        for g in 0..self.groups {
            for (j, ci) in (g * cpg..(g + 1) * cpg).enumerate() {
                let ga = gamma[ci];
                for (d, &s) in dxhat[j * pl..(j + 1) * pl].iter_mut().zip(dy.plane(ci)) {
                    *d = s * ga;
                }
            }
            let xh = &cache.xhat.data[g * span..(g + 1) * span];
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            let is = cache.inv_std[g];
            let out = &mut dx.data[g * span..(g + 1) * span];
            for i in 0..span {
                out[i] = is / nf * (nf * dxhat[i] - sum_d - xh[i] * sum_dx);
            }
        }
        dx
    }
}

/// Fully connected layer, `weight` stored out × in.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, din: usize, dout: usize) -> Self {
        let weight = layout.add(
            format!("{name}.weight"),
            &[dout, din],
            Init::Normal(1.0 / (din as f64).sqrt()),
        );
        let bias = layout.add(format!("{name}.bias"), &[dout], Init::Const(0.0));
        Self {
            din,
            dout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], v: &[T]) -> Vec<T> {
        let mut out = self.bias.of(p).to_vec();
        T::gemm(self.dout, self.din, 1, self.weight.of(p), false, v, false, T::one(), &mut out);
        out
    }

    pub fn backward<T: Real>(&self, p: &[T], v: &[T], dy: &[T], grads: Option<&mut [T]>) -> Vec<T> {
        if let Some(g) = grads {
            let gw = self.weight.of_mut(g);
            for (o, &d) in dy.iter().enumerate() {
                for (i, &vi) in v.iter().enumerate() {
                    gw[o * self.din + i] += d * vi;
                }
            }
            for (gb, &d) in self.bias.of_mut(g).iter_mut().zip(dy) {
                *gb += d;
            }
        }
        let mut dv = vec![T::zero(); self.din];
        T::gemm(self.din, self.dout, 1, self.weight.of(p), true, dy, false, T::zero(), &mut dv);
        dv
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Grid<T>) -> Grid<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Grid::zeros(x.c, h, w);
    for ch in 0..x.c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Grid<T>) -> Grid<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Grid::zeros(dy.c, h, w);
    for ch in 0..dy.c {
        let src = dy.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    out
}
