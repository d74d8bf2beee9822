//! A small explicit-backward neural network toolkit.
//!
//! Parameters of a network live in one flat vector described by a
//! [`Layout`]; layers hold [`Slot`]s into it. Gradients are a flat vector
//! of the same length, which keeps optimizer steps, checksums,
//! checkpointing and finite-difference checks uniform. Everything is
//! generic over [`Real`] so the same code runs in `f32` for training and
//! `f64` for gradient checks.

mod layers;
mod seq;

pub use layers::{silu, silu_backward, upsample2, upsample2_backward, Conv2d, GroupNorm, GroupNormCache, Linear};
pub use seq::{Op, Seq, SeqTrace};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::rng;

/// Floating-point element type for arrays and parameters.
pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn cst(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for row-major `a: m×k`, `b: k×n`,
    /// with optional transposition expressed through strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // stored as rows×cols row-major, or as its transpose
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn cst(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: bounds asserted above; strides describe dense m×k, k×n, m×n.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Location of one named parameter tensor inside the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.offset..self.offset + self.len]
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Const(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    pub init: Init,
}

/// Ordered registry of the named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.len,
            len,
        };
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            slot,
            init,
        });
        self.len += len;
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Draws initial values; each tensor gets its own stream so adding a
    /// parameter never perturbs the others.
    pub fn init<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut out = vec![T::zero(); self.len];
        for (i, spec) in self.specs.iter().enumerate() {
            let dst = spec.slot.of_mut(&mut out);
            match spec.init {
                Init::Const(v) => dst.fill(T::cst(v)),
                Init::Normal(std) => {
                    let mut r = rng::stream(&[seed, rng::tag::INIT, i as u64]);
                    for d in dst.iter_mut() {
                        *d = T::cst(std * rng::normal::<f64, _>(&mut r));
                    }
                }
            }
        }
        out
    }
}

/// SHA-256 over the little-endian bytes of a parameter vector.
pub fn checksum(values: &[f32]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Converts a parameter vector between precisions.
pub fn cast<A: Real, B: Real>(v: &[A]) -> Vec<B> {
    v.iter().map(|x| B::cst(x.f64())).collect()
}
