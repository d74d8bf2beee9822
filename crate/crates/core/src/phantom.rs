//! Synthetic paired perfusion / diffusion-MRI phantoms.
//!
//! Each case holds a source perfusion stack (n time points), a two-channel
//! target ([DWI-like, ADC-like]) and a binary lesion mask. Anatomy is an
//! elliptical brain with a smooth two-band tissue texture. A lesion, when
//! present, is bright on DWI, dark on ADC, and hypoperfused in the source
//! (enhancement scaled by 0.4 and delayed by one time index).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{Grid, ImageSlice, LesionMask};
use crate::rng::{self, tag};
use crate::tensor_io::{read_tensor, write_tensor, Tensor};

pub const TARGET_CHANNELS: usize = 2;
pub const DWI: usize = 0;
pub const ADC: usize = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Lesion contrast on the target channels.
const DWI_LESION_DELTA: f64 = 0.45;
const ADC_LESION_DELTA: f64 = -0.45;
/// Hypoperfusion signature inside the lesion.
const LESION_PERFUSION_SCALE: f64 = 0.4;
const LESION_DELAY: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// (H, W)
    pub image_size: [usize; 2],
    pub n_source_channels: usize,
    pub lesion_prevalence: f64,
    /// Lesion area bounds as fractions of brain area (log-uniform between).
    pub lesion_area_min_frac: f64,
    pub lesion_area_max_frac: f64,
    /// Std of additive Gaussian noise on the source stack.
    pub source_noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            n_source_channels: 5,
            lesion_prevalence: 0.11,
            lesion_area_min_frac: 0.002,
            lesion_area_max_frac: 0.15,
            source_noise: 0.02,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::config("image_size", format!("must be at least 16×16, got {h}×{w}")));
        }
        if !(0.0..=1.0).contains(&self.lesion_prevalence) {
            return Err(Error::config(
                "lesion_prevalence",
                format!("must lie in [0, 1], got {}", self.lesion_prevalence),
            ));
        }
        if self.n_source_channels == 0 {
            return Err(Error::config("n_source_channels", "must be at least 1"));
        }
        if !(self.lesion_area_min_frac > 0.0
            && self.lesion_area_min_frac <= self.lesion_area_max_frac
            && self.lesion_area_max_frac < 1.0)
        {
            return Err(Error::config(
                "lesion_area_min_frac",
                "need 0 < lesion_area_min_frac <= lesion_area_max_frac < 1",
            ));
        }
        if !(self.source_noise >= 0.0 && self.source_noise.is_finite()) {
            return Err(Error::config("source_noise", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    /// H×W×n perfusion stack.
    pub source: ImageSlice,
    /// H×W×2, channels [DWI-like, ADC-like].
    pub target: ImageSlice,
    pub mask: LesionMask,
    pub lesion_area_px: usize,
    /// Simulated brain support (not persisted; used by invariant checks).
    pub brain: LesionMask,
}

impl PhantomCase {
    pub fn has_lesion(&self) -> bool {
        self.lesion_area_px > 0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gamma-variate enhancement curve peaking (value 1) at `peak`.
fn enhancement(tau: f64, peak: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let r = tau / peak;
    r * r * (2.0 * (1.0 - r)).exp()
}

/// Deterministically generates one case from `(seed, config)`.
pub fn generate_case(seed: u64, config: &PhantomConfig) -> Result<PhantomCase> {
    generate_case_with_id(seed, config, format!("phantom-{seed:016x}"))
}

pub(crate) fn generate_case_with_id(seed: u64, config: &PhantomConfig, case_id: String) -> Result<PhantomCase> {
    config.validate()?;
    let [h, w] = config.image_size;
    let n = config.n_source_channels;
    let mut r = rng::stream(&[seed, tag::PHANTOM]);

    // brain ellipse in normalized coordinates
    let cx = r.random_range(-0.05..0.05);
    let cy = r.random_range(-0.05..0.05);
    let ax = r.random_range(0.70..0.82);
    let ay = r.random_range(0.78..0.90);
    let theta: f64 = r.random_range(-0.2..0.2);
    let (st, ct) = theta.sin_cos();
    let edge_px = 0.6;

    // smooth texture blobs
    let n_blobs = 6;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                r.random_range(-0.7..0.7),
                r.random_range(-0.7..0.7),
                r.random_range(0.15..0.35),
                r.random_range(-1.0..1.0),
            )
        })
        .collect();

    let npx = h * w;
    let mut brain_w = vec![0.0f64; npx];
    let mut white = vec![0.0f64; npx];
    let mut radial = vec![0.0f64; npx];
    let scale = 0.5 * h.min(w) as f64;
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0 - cx;
            let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0 - cy;
            let (ur, vr) = (ct * u + st * v, -st * u + ct * v);
            let rho = ((ur / ax).powi(2) + (vr / ay).powi(2)).sqrt();
            let i = y * w + x;
            radial[i] = rho;
            brain_w[i] = sigmoid((1.0 - rho) * scale / edge_px);
            let f: f64 = blobs
                .iter()
                .map(|&(bx, by, s, a)| {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
            white[i] = sigmoid(f / 0.15);
        }
    }
    let brain: Vec<bool> = brain_w.iter().map(|&b| b > 0.5).collect();
    let brain_area = brain.iter().filter(|&&b| b).count();

    // lesion: smoothed union (metaball) of 1-3 discs thresholded at 0.5
    let lesion_draw: f64 = r.random();
    let has_lesion = lesion_draw < config.lesion_prevalence;
    let mut mask = vec![0.0f32; npx];
    if has_lesion && brain_area > 0 {
        let lmin = config.lesion_area_min_frac.ln();
        let lmax = config.lesion_area_max_frac.ln();
        let frac = if lmax > lmin { r.random_range(lmin..lmax).exp() } else { lmin.exp() };
        let area = frac * brain_area as f64;
        let r_main = (area / std::f64::consts::PI).sqrt().max(0.5);
        let interior: Vec<usize> = (0..npx).filter(|&i| radial[i] < 0.7).collect();
        let candidates = if interior.is_empty() {
            (0..npx).filter(|&i| brain[i]).collect::<Vec<_>>()
        } else {
            interior
        };
        let c0 = candidates[r.random_range(0..candidates.len())];
        let (y0, x0) = ((c0 / w) as f64 + 0.5, (c0 % w) as f64 + 0.5);
        let n_discs = r.random_range(1..=3usize);
        let mut discs = vec![(x0, y0, r_main)];
        for _ in 1..n_discs {
            let ang = r.random_range(0.0..std::f64::consts::TAU);
            let off = r.random_range(0.3..0.9) * r_main;
            let rad = r.random_range(0.5..0.8) * r_main;
            discs.push((x0 + off * ang.cos(), y0 + off * ang.sin(), rad));
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !brain[i] {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let field: f64 = discs
                    .iter()
                    .map(|&(dx, dy, rad)| {
                        let d2 = ((px - dx).powi(2) + (py - dy).powi(2)) / (rad * rad);
                        (-d2 * std::f64::consts::LN_2).exp()
                    })
                    .sum();
                if field >= 0.5 {
                    mask[i] = 1.0;
                }
            }
        }
        if mask.iter().all(|&m| m == 0.0) {
            mask[c0] = 1.0;
        }
    }

    // targets
    let mut target = Grid::<f32>::zeros(TARGET_CHANNELS, h, w);
    for i in 0..npx {
        let (bw, wm, m) = (brain_w[i], white[i], mask[i] as f64);
        let dwi = 0.35 * (1.0 - wm) + 0.10 * wm + DWI_LESION_DELTA * m;
        let adc = 0.10 * (1.0 - wm) + 0.35 * wm + ADC_LESION_DELTA * m;
        target.data[i] = (-1.0 + bw * (dwi + 1.0)).clamp(-1.0, 1.0) as f32;
        target.data[npx + i] = (-1.0 + bw * (adc + 1.0)).clamp(-1.0, 1.0) as f32;
    }

    // source perfusion stack
    let peak = ((n as f64 - 1.0) / 2.0).max(1.0);
    let mut source = Grid::<f32>::zeros(n, h, w);
    for tau in 0..n {
        let normal_curve = enhancement(tau as f64, peak);
        let lesion_curve = if tau >= LESION_DELAY {
            LESION_PERFUSION_SCALE * enhancement((tau - LESION_DELAY) as f64, peak)
        } else {
            0.0
        };
        let plane = source.plane_mut(tau);
        for i in 0..npx {
            let perf = 1.0 - 0.45 * white[i];
            let curve = if mask[i] > 0.0 { lesion_curve } else { normal_curve };
            let noise = if config.source_noise > 0.0 {
                config.source_noise * rng::normal::<f64, _>(&mut r)
            } else {
                0.0
            };
            let v = -1.0 + brain_w[i] * (0.5 + 1.1 * perf * curve + noise);
            plane[i] = v.clamp(-1.0, 1.0) as f32;
        }
    }

    let mask = LesionMask::from_vec(h, w, mask)?;
    let lesion_area_px = mask.area();
    let brain = LesionMask::from_vec(h, w, brain.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    Ok(PhantomCase {
        case_id,
        source,
        target,
        mask,
        lesion_area_px,
        brain,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub source: String,
    pub target: String,
    pub mask: String,
}

/// Per-case JSON record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub files: CaseFiles,
    pub lesion_area_px: usize,
    pub has_lesion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    /// split name → case ids
    pub splits: BTreeMap<String, Vec<String>>,
    pub lesion_prevalence: f64,
    /// Per-split prevalence overrides, if any.
    #[serde(default)]
    pub split_prevalence: BTreeMap<String, f64>,
    pub image_size: [usize; 2],
    pub n_source_channels: usize,
    pub m_target_channels: usize,
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::config("split", format!("dataset has no split named `{name}`")))
    }

    pub fn all_cases(&self) -> Vec<&String> {
        let mut v: Vec<&String> = self.splits.values().flatten().collect();
        v.sort();
        v
    }
}

/// Split sizes: floor(n·ratio) for val and test, remainder to train.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::config("split_ratios", format!("ratios must be positive, got {ratios:?}")));
    }
    if ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split_ratios",
            format!("ratios must sum to 1, got {}", tr + va + te),
        ));
    }
    let floor = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let (nv, nt) = (floor(va), floor(te));
    Ok((n - nv - nt, nv, nt))
}

pub fn case_id(index: usize) -> String {
    format!("case{index:05}")
}

/// Options controlling dataset construction beyond the phantom config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildOptions {
    /// Lesion prevalence overrides keyed by split name.
    pub split_prevalence: BTreeMap<String, f64>,
    pub config_hash: Option<String>,
    pub exec: Exec,
}

/// Generates `n_cases` phantoms, assigns them to train/val/test, and writes
/// tensors, per-case JSON and `manifest.json` under `out_dir`.
pub fn build_dataset(
    n_cases: usize,
    split_ratios: (f64, f64, f64),
    seed: u64,
    out_dir: &Path,
    config: &PhantomConfig,
    opts: &BuildOptions,
) -> Result<DatasetManifest> {
    config.validate()?;
    for (name, p) in &opts.split_prevalence {
        if !(0.0..=1.0).contains(p) {
            return Err(Error::config(format!("split_prevalence.{name}"), "must lie in [0, 1]"));
        }
    }
    let (ntr, nva, _nte) = split_sizes(n_cases, split_ratios)?;
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut rng::stream(&[seed, tag::SPLIT]));
    let mut assignment = vec![""; n_cases];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = if pos < ntr {
            "train"
        } else if pos < ntr + nva {
            "val"
        } else {
            "test"
        };
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cases_dir = out_dir.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;

    let results = opts.exec.map_range(n_cases, |i| -> Result<()> {
        let split = assignment[i];
        let mut cfg = config.clone();
        if let Some(&p) = opts.split_prevalence.get(split) {
            cfg.lesion_prevalence = p;
        }
        let id = case_id(i);
        let case = generate_case_with_id(rng::mix(&[seed, i as u64]), &cfg, id.clone())?;
        write_case(&cases_dir, &case)
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut splits: BTreeMap<String, Vec<String>> = ["train", "val", "test"]
        .iter()
        .map(|s| (s.to_string(), Vec::new()))
        .collect();
    for (i, split) in assignment.iter().enumerate() {
        splits.get_mut(*split).unwrap().push(case_id(i));
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed,
        splits,
        lesion_prevalence: config.lesion_prevalence,
        split_prevalence: opts.split_prevalence.clone(),
        image_size: config.image_size,
        n_source_channels: config.n_source_channels,
        m_target_channels: TARGET_CHANNELS,
        phantom: config.clone(),
        config_hash: opts.config_hash.clone(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_case(dir: &Path, case: &PhantomCase) -> Result<()> {
    let id = &case.case_id;
    let files = CaseFiles {
        source: format!("{id}_source.tnsr"),
        target: format!("{id}_target.tnsr"),
        mask: format!("{id}_mask.tnsr"),
    };
    write_tensor(dir.join(&files.source), &Tensor::from_grid(&case.source))?;
    write_tensor(dir.join(&files.target), &Tensor::from_grid(&case.target))?;
    write_tensor(dir.join(&files.mask), &Tensor::from_mask(&case.mask))?;
    let rec = CaseRecord {
        case_id: id.clone(),
        files,
        lesion_area_px: case.lesion_area_px,
        has_lesion: case.has_lesion(),
    };
    let path = dir.join(format!("{id}.json"));
    let text = serde_json::to_string_pretty(&rec).map_err(|e| Error::json(id.as_str(), e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if m.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            0,
            format!("manifest format_version {} (expected {MANIFEST_FORMAT_VERSION})", m.format_version),
        ));
    }
    Ok(m)
}

/// Case data loaded from disk. `brain` is not persisted and is left empty.
pub fn load_case(dir: &Path, case_id: &str) -> Result<PhantomCase> {
    let cases = dir.join("cases");
    let path = cases.join(format!("{case_id}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rec: CaseRecord = serde_json::from_str(&text).map_err(|e| Error::json(case_id, e))?;
    let source = read_tensor(cases.join(&rec.files.source))?.to_grid()?;
    let target = read_tensor(cases.join(&rec.files.target))?.to_grid()?;
    let mask = read_tensor(cases.join(&rec.files.mask))?.to_mask()?;
    let lesion_area_px = mask.area();
    Ok(PhantomCase {
        case_id: rec.case_id,
        brain: LesionMask::empty(mask.h, mask.w),
        source,
        target,
        mask,
        lesion_area_px,
    })
}

pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<PhantomCase>> {
    manifest.split(split)?.iter().map(|id| load_case(dir, id)).collect()
}

pub fn case_json_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join("cases").join(format!("{case_id}.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_over(v: &[f32], sel: impl Fn(usize) -> bool) -> f64 {
        let (s, n) = v
            .iter()
            .enumerate()
            .filter(|(i, _)| sel(*i))
            .fold((0.0, 0usize), |(s, n), (_, &x)| (s + x as f64, n + 1));
        s / n as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        assert_eq!(generate_case(7, &cfg).unwrap(), generate_case(7, &cfg).unwrap());
        assert_ne!(generate_case(7, &cfg).unwrap().target, generate_case(8, &cfg).unwrap().target);
    }

    #[test]
    fn zero_prevalence_gives_empty_masks() {
        let cfg = PhantomConfig {
            lesion_prevalence: 0.0,
            ..Default::default()
        };
        for s in 0..20 {
            let c = generate_case(s, &cfg).unwrap();
            assert_eq!(c.lesion_area_px, 0);
            assert!(c.mask.data.iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn invariants_hold_on_lesion_cases() {
        let cfg = PhantomConfig {
            lesion_prevalence: 1.0,
            ..Default::default()
        };
        for s in 0..40 {
            let c = generate_case(s, &cfg).unwrap();
            assert!(c.mask.is_binary());
            assert_eq!(c.lesion_area_px, c.mask.area());
            assert!(c.lesion_area_px > 0);
            assert!(c.source.data.iter().chain(&c.target.data).all(|v| (-1.0..=1.0).contains(v)));
            let npx = c.mask.data.len();
            for i in 0..npx {
                if c.mask.data[i] == 1.0 {
                    assert_eq!(c.brain.data[i], 1.0, "lesion outside brain");
                }
            }
            let inside = |i: usize| c.mask.data[i] == 1.0;
            let tissue = |i: usize| c.brain.data[i] == 1.0 && c.mask.data[i] == 0.0;
            let dwi = c.target.plane(DWI);
            let adc = c.target.plane(ADC);
            assert!(mean_over(dwi, inside) > mean_over(dwi, tissue));
            assert!(mean_over(adc, inside) < mean_over(adc, tissue));
        }
    }

    #[test]
    fn lesion_is_hypoperfused_in_source() {
        let cfg = PhantomConfig {
            lesion_prevalence: 1.0,
            source_noise: 0.0,
            ..Default::default()
        };
        let c = generate_case(3, &cfg).unwrap();
        // the peak time point is where the scaled, delayed curve falls furthest below normal
        let peak = c.source.plane(2);
        let inside = |i: usize| c.mask.data[i] == 1.0;
        let tissue = |i: usize| c.brain.data[i] == 1.0 && c.mask.data[i] == 0.0;
        assert!(mean_over(peak, inside) < mean_over(peak, tissue) - 0.2);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = PhantomConfig {
            image_size: [8, 64],
            ..Default::default()
        };
        assert!(matches!(generate_case(0, &cfg), Err(Error::Config { .. })));
        let cfg = PhantomConfig {
            lesion_prevalence: 1.5,
            ..Default::default()
        };
        assert!(generate_case(0, &cfg).is_err());
    }

    #[test]
    fn floor_allocation_sizes() {
        assert_eq!(split_sizes(817, (0.70, 0.10, 0.20)).unwrap(), (573, 81, 163));
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)).unwrap(), (8, 1, 1));
        assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
        assert!(split_sizes(10, (1.0, 0.0, 0.0)).is_err());
    }
}
