//! Planar (channel-major) 2-D arrays used for images, latents and masks.
//!
//! On disk, images are stored height × width × channels; in memory the
//! channel planes are contiguous because every convolution and metric
//! works plane by plane.

use crate::error::{arg_err, Result};
use crate::nn::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

/// An image slice: target modalities or source time points, in [-1, 1].
pub type ImageSlice = Grid<f32>;
/// A latent representation z, (H/4)×(W/4)×c.
pub type LatentGrid = Grid<f32>;

impl<T: Copy + Default> Grid<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::default(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(arg_err!(
                "grid data length {} does not match {c}×{h}×{w}",
                data.len()
            ));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn filled(c: usize, h: usize, w: usize, v: T) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![v; c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, ch: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> T {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(ch * self.h + y) * self.w + x]
    }

    /// Extracts a single channel as a one-channel grid.
    pub fn channel(&self, ch: usize) -> Self {
        Self {
            c: 1,
            h: self.h,
            w: self.w,
            data: self.plane(ch).to_vec(),
        }
    }

    /// Stacks `a` over `b` along the channel axis.
    pub fn concat(a: &Self, b: &Self) -> Result<Self> {
        if a.h != b.h || a.w != b.w {
            return Err(arg_err!(
                "cannot concatenate {}×{} with {}×{} grids",
                a.h,
                a.w,
                b.h,
                b.w
            ));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Self {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// Splits off the first `k` channels.
    pub fn split(&self, k: usize) -> (Self, Self) {
        let n = k * self.plane_len();
        (
            Self {
                c: k,
                h: self.h,
                w: self.w,
                data: self.data[..n].to_vec(),
            },
            Self {
                c: self.c - k,
                h: self.h,
                w: self.w,
                data: self.data[n..].to_vec(),
            },
        )
    }

    /// Height × width × channel row-major copy (the on-disk order).
    pub fn to_hwc(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    out.push(self.at(ch, y, x));
                }
            }
        }
        out
    }

    pub fn from_hwc(h: usize, w: usize, c: usize, hwc: &[T]) -> Result<Self> {
        if hwc.len() != h * w * c {
            return Err(arg_err!("hwc data length {} does not match {h}×{w}×{c}", hwc.len()));
        }
        let mut g = Self::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    *g.at_mut(ch, y, x) = hwc[(y * w + x) * c + ch];
                }
            }
        }
        Ok(g)
    }

    /// Swaps the spatial axes of every plane.
    pub fn transpose(&self) -> Self {
        let mut g = Self::zeros(self.c, self.w, self.h);
        for ch in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    *g.at_mut(ch, x, y) = self.at(ch, y, x);
                }
            }
        }
        g
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }
}

impl<T: Real> Grid<T> {
    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::cst(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Binary lesion mask, H×W, values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl LesionMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![1.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(arg_err!("mask length {} does not match {h}×{w}", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Errors unless every element is exactly 0 or 1.
    pub fn check_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(i) => Err(arg_err!(
                "lesion mask is not binary: element {i} = {}",
                self.data[i]
            )),
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                data[x * self.h + y] = self.data[y * self.w + x];
            }
        }
        Self {
            h: self.w,
            w: self.h,
            data,
        }
    }
}
