//! Portable tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `TNSR` |
//! | 4     | version, `1` |
//! | 5     | dtype code, `1` = IEEE-754 float32 |
//! | 6     | rank `r`, 1..=4 |
//! | 7     | reserved, `0` |
//! | 8..8+4r | dims as `u32` |
//! | rest  | row-major payload |

use std::path::Path;

use crate::error::{arg_err, Error, Result};
use crate::grid::{Grid, LesionMask};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MAX_RANK: usize = 4;

/// A dense float32 array of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(arg_err!("tensor rank must be 1..={MAX_RANK}, got {}", dims.len()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(arg_err!("tensor dims {dims:?} need {n} elements, got {}", data.len()));
        }
        Ok(Self { dims, data })
    }

    /// An image grid as H × W × C.
    pub fn from_grid(g: &Grid<f32>) -> Self {
        Self {
            dims: vec![g.h, g.w, g.c],
            data: g.to_hwc(),
        }
    }

    pub fn to_grid(&self) -> Result<Grid<f32>> {
        match self.dims[..] {
            [h, w, c] => Grid::from_hwc(h, w, c, &self.data),
            [h, w] => Grid::from_vec(1, h, w, self.data.clone()),
            _ => Err(arg_err!("expected an H×W×C tensor, got dims {:?}", self.dims)),
        }
    }

    pub fn from_mask(m: &LesionMask) -> Self {
        Self {
            dims: vec![m.h, m.w],
            data: m.data.clone(),
        }
    }

    pub fn to_mask(&self) -> Result<LesionMask> {
        match self.dims[..] {
            [h, w] => LesionMask::from_vec(h, w, self.data.clone()),
            _ => Err(arg_err!("expected an H×W mask tensor, got dims {:?}", self.dims)),
        }
    }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let r = t.dims.len();
    if r == 0 || r > MAX_RANK {
        return Err(arg_err!("tensor rank must be 1..={MAX_RANK}, got {r}"));
    }
    let n: usize = t.dims.iter().product();
    if n != t.data.len() {
        return Err(arg_err!("tensor dims {:?} need {n} elements, got {}", t.dims, t.data.len()));
    }
    let mut out = Vec::with_capacity(8 + 4 * r + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, r as u8, 0]);
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| arg_err!("dimension {d} exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses tensor bytes; `context` names the source in error messages.
pub fn decode(bytes: &[u8], context: &str) -> Result<Tensor> {
    let fmt = |offset: usize, msg: String| Error::format(context, offset as u64, msg);
    if bytes.len() < 8 {
        return Err(fmt(bytes.len(), format!("header needs 8 bytes, found {}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(0, format!("expected magic \"TNSR\", found {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    if bytes[4] != VERSION {
        return Err(fmt(4, format!("unsupported version {} (expected {VERSION})", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(fmt(5, format!("unsupported dtype code {} (expected {DTYPE_F32})", bytes[5])));
    }
    let r = bytes[6] as usize;
    if r == 0 || r > MAX_RANK {
        return Err(fmt(6, format!("rank {r} outside 1..={MAX_RANK}")));
    }
    if bytes[7] != 0 {
        return Err(fmt(7, format!("reserved byte is {} (expected 0)", bytes[7])));
    }
    let header = 8 + 4 * r;
    if bytes.len() < header {
        return Err(fmt(bytes.len(), format!("dims need {header} header bytes, found {}", bytes.len())));
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt(8, format!("dims {dims:?} overflow")))?;
    let expected = n * 4;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(fmt(
            header,
            format!("payload: expected {expected} bytes, found {actual}"),
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
