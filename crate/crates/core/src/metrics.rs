//! Image-quality metrics and per-modality evaluation reports.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{arg_err, Error, Result};
use crate::exec::Exec;
use crate::grid::{Grid, ImageSlice, LesionMask};
use crate::phantom::{self, DatasetManifest};
use crate::tensor_io::{self, Tensor};

/// PSNR peak value: the width of the [-1, 1] intensity range.
pub const DATA_RANGE: f64 = 2.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const FRECHET_EPS: f64 = 1e-6;

fn check_pair(x: &Grid<f32>, y: &Grid<f32>) -> Result<()> {
    if !x.same_shape(y) {
        return Err(arg_err!("metric inputs differ in shape: {:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn mae(x: &Grid<f32>, x_hat: &Grid<f32>) -> Result<f64> {
    check_pair(x, x_hat)?;
    let s: f64 = x.data.iter().zip(&x_hat.data).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(s / x.data.len() as f64)
}

/// Σ M·|x − x̂| / (Σ M · channels); `None` for an empty mask.
pub fn lesion_mae(x: &Grid<f32>, x_hat: &Grid<f32>, mask: &LesionMask) -> Result<Option<f64>> {
    check_pair(x, x_hat)?;
    if (mask.h, mask.w) != (x.h, x.w) {
        return Err(arg_err!("mask {}×{} does not match image {}×{}", mask.h, mask.w, x.h, x.w));
    }
    mask.check_binary()?;
    let area = mask.area();
    if area == 0 {
        return Ok(None);
    }
    let pl = x.plane_len();
    let mut s = 0.0f64;
    for ch in 0..x.c {
        let (a, b) = (x.plane(ch), x_hat.plane(ch));
        for i in 0..pl {
            if mask.data[i] != 0.0 {
                s += (a[i] as f64 - b[i] as f64).abs();
            }
        }
    }
    Ok(Some(s / (area * x.c) as f64))
}

pub fn mse(x: &Grid<f32>, x_hat: &Grid<f32>) -> Result<f64> {
    check_pair(x, x_hat)?;
    let s: f64 = x
        .data
        .iter()
        .zip(&x_hat.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s / x.data.len() as f64)
}

/// 10·log10(MAX² / MSE) with MAX = 2; `f64::INFINITY` when MSE is 0.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()
    }
}

pub fn psnr(x: &Grid<f32>, x_hat: &Grid<f32>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, x_hat)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of an h×w plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_window();
    let c1 = (0.01 * DATA_RANGE).powi(2);
    let c2 = (0.03 * DATA_RANGE).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
    let (mu_a, ho, wo) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let n = (ho * wo) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        let l_i = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim += l_i * cs_i;
        cs += cs_i;
    }
    (ssim / n, cs / n)
}

fn pool2(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let i = 2 * y * w + 2 * x;
            out[y * wo + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    (out, ho, wo)
}

/// Largest scale count ≤ 5 with min(H, W) ≥ 2^(S−1)·11.
pub fn ms_ssim_scales(h: usize, w: usize) -> Result<usize> {
    let m = h.min(w);
    if m < SSIM_WINDOW {
        return Err(arg_err!("image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"));
    }
    Ok((1..=5).rev().find(|&s| m >= (1 << (s - 1)) * SSIM_WINDOW).unwrap_or(1))
}

/// MS-SSIM with `scales` levels; weights are the first `scales` defaults,
/// renormalized. Negative intermediate terms are clamped to 0. With one
/// scale this is plain SSIM.
pub fn ms_ssim_with_scales(x: &Grid<f32>, x_hat: &Grid<f32>, scales: usize) -> Result<f64> {
    check_pair(x, x_hat)?;
    if scales == 0 || scales > 5 || x.h.min(x.w) < (1 << (scales - 1)) * SSIM_WINDOW {
        return Err(arg_err!("{scales} MS-SSIM scales do not fit a {}×{} image", x.h, x.w));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut total = 0.0;
    for ch in 0..x.c {
        let mut a: Vec<f64> = x.plane(ch).iter().map(|&v| v as f64).collect();
        let mut b: Vec<f64> = x_hat.plane(ch).iter().map(|&v| v as f64).collect();
        let (mut h, mut w) = (x.h, x.w);
        let mut val = 1.0;
        for s in 0..scales {
            let (ssim, cs) = ssim_terms(&a, &b, h, w);
            if scales == 1 {
                val = ssim;
                break;
            }
            let wt = MS_SSIM_WEIGHTS[s] / wsum;
            if s + 1 == scales {
                val *= ssim.max(0.0).powf(wt);
            } else {
                val *= cs.max(0.0).powf(wt);
                let (pa, nh, nw) = pool2(&a, h, w);
                let (pb, _, _) = pool2(&b, h, w);
                (a, b, h, w) = (pa, pb, nh, nw);
            }
        }
        total += val;
    }
    Ok(total / x.c as f64)
}

/// MS-SSIM at the automatically chosen scale count, averaged over channels.
pub fn ms_ssim(x: &Grid<f32>, x_hat: &Grid<f32>) -> Result<f64> {
    ms_ssim_with_scales(x, x_hat, ms_ssim_scales(x.h, x.w)?)
}

/// Fréchet distance between Gaussians fitted to two feature sets (rows
/// are samples). Covariances are unbiased and regularized by 1e-6·I.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map(|r| r.len()).ok_or_else(|| arg_err!("first feature set is empty"))?;
    if b.is_empty() {
        return Err(arg_err!("second feature set is empty"));
    }
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(arg_err!("feature dimensions differ (expected {d})"));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(arg_err!("need at least two samples per set"));
    }
    let (mu_a, cov_a) = moments(a, d);
    let (mu_b, cov_b) = moments(b, d);
    let sqrt_a = psd_sqrt(&cov_a);
    let m = &sqrt_a * &cov_b * &sqrt_a;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let fd = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

fn moments(rows: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let mut mu = DVector::zeros(d);
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (r[j] - mu[j]);
            }
        }
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += FRECHET_EPS;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Maps an image to a fixed-length feature vector for the Fréchet distance.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn features(&self, x: &ImageSlice) -> Result<Vec<f64>>;
}

/// Frozen encoder followed by spatial mean pooling (d = latent channels).
pub struct EncoderFeatures<'a> {
    pub ae: &'a Autoencoder,
}

impl FeatureExtractor for EncoderFeatures<'_> {
    fn name(&self) -> String {
        "autoencoder_encoder_mean_pool".into()
    }

    fn dim(&self) -> usize {
        self.ae.latent_channels()
    }

    fn features(&self, x: &ImageSlice) -> Result<Vec<f64>> {
        let z = self.ae.encode(x)?;
        Ok((0..z.c)
            .map(|ch| z.plane(ch).iter().map(|&v| v as f64).sum::<f64>() / z.plane_len() as f64)
            .collect())
    }
}

/// Display name of target channel `i`.
pub fn modality_name(i: usize, m: usize) -> String {
    match (m, i) {
        (2, 0) => "DWI".into(),
        (2, 1) => "ADC".into(),
        _ => format!("channel{i}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub modality: String,
    pub mae: f64,
    pub lesion_mae: Option<f64>,
    /// `None` together with `psnr_infinite` when the prediction is exact.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAggregate {
    pub modality: String,
    pub cases: usize,
    pub mae: f64,
    pub lesion_mae: Option<f64>,
    pub lesion_cases: usize,
    /// Mean over cases with finite PSNR.
    pub psnr: Option<f64>,
    pub psnr_infinite_cases: usize,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetEntry {
    pub modality: String,
    pub frechet_feature_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub psnr_max: f64,
    pub ms_ssim_scales: usize,
    pub ms_ssim_weights: Vec<f64>,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub feature_extractor: String,
    pub feature_dim: usize,
    pub frechet_regularization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingPrediction {
    pub case_id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_count: usize,
    pub lesion_case_count: usize,
    pub per_case: Vec<CaseMetrics>,
    pub aggregate: Vec<ModalityAggregate>,
    pub frechet: Vec<FrechetEntry>,
    pub config: MetricsConfig,
    pub missing: Vec<MissingPrediction>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// Seed and config hash stamped onto a report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// Ground truth and prediction for one case.
pub struct EvalCase {
    pub case_id: String,
    pub target: ImageSlice,
    pub mask: LesionMask,
    pub prediction: ImageSlice,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Computes all metrics per case and modality plus the per-modality
/// Fréchet distance. For modality i, the Fréchet features see images
/// whose other channels are ground truth in both sets.
pub fn evaluate_cases(cases: &[EvalCase], extractor: &dyn FeatureExtractor, exec: Exec) -> Result<MetricsReport> {
    let first = cases.first().ok_or_else(|| arg_err!("nothing to evaluate"))?;
    let m = first.target.c;
    let scales = ms_ssim_scales(first.target.h, first.target.w)?;
    for c in cases {
        if !c.prediction.same_shape(&c.target) {
            return Err(arg_err!(
                "prediction for `{}` has shape {:?}, expected {:?}",
                c.case_id,
                c.prediction.shape(),
                c.target.shape()
            ));
        }
    }
    let per_case: Vec<Vec<CaseMetrics>> = exec
        .map(cases, |c| -> Result<Vec<CaseMetrics>> {
            (0..m)
                .map(|i| {
                    let (x, y) = (c.target.channel(i), c.prediction.channel(i));
                    let p = psnr(&x, &y)?;
                    Ok(CaseMetrics {
                        case_id: c.case_id.clone(),
                        modality: modality_name(i, m),
                        mae: mae(&x, &y)?,
                        lesion_mae: lesion_mae(&x, &y, &c.mask)?,
                        psnr: p.is_finite().then_some(p),
                        psnr_infinite: p.is_infinite(),
                        ms_ssim: ms_ssim_with_scales(&x, &y, scales)?,
                    })
                })
                .collect()
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut aggregate = Vec::with_capacity(m);
    let mut frechet = Vec::with_capacity(m);
    for i in 0..m {
        let rows: Vec<&CaseMetrics> = per_case.iter().map(|r| &r[i]).collect();
        aggregate.push(ModalityAggregate {
            modality: modality_name(i, m),
            cases: rows.len(),
            mae: mean(rows.iter().map(|r| r.mae)).unwrap_or(0.0),
            lesion_mae: mean(rows.iter().filter_map(|r| r.lesion_mae)),
            lesion_cases: rows.iter().filter(|r| r.lesion_mae.is_some()).count(),
            psnr: mean(rows.iter().filter_map(|r| r.psnr)),
            psnr_infinite_cases: rows.iter().filter(|r| r.psnr_infinite).count(),
            ms_ssim: mean(rows.iter().map(|r| r.ms_ssim)).unwrap_or(0.0),
        });
        let feats = exec.map(cases, |c| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut fake = c.target.clone();
            fake.plane_mut(i).copy_from_slice(c.prediction.plane(i));
            let fr = extractor.features(&c.target)?;
            let ff = extractor.features(&fake)?;
            if fr.len() != extractor.dim() || ff.len() != extractor.dim() {
                return Err(Error::Contract(format!(
                    "feature extractor `{}` returned {} values, declared {}",
                    extractor.name(),
                    fr.len(),
                    extractor.dim()
                )));
            }
            Ok((fr, ff))
        });
        let (mut real, mut fake) = (Vec::new(), Vec::new());
        for f in feats {
            let (a, b) = f?;
            real.push(a);
            fake.push(b);
        }
        let fd = if cases.len() >= 2 { frechet_distance(&real, &fake)? } else { 0.0 };
        frechet.push(FrechetEntry {
            modality: modality_name(i, m),
            frechet_feature_distance: fd,
        });
    }
    Ok(MetricsReport {
        case_count: cases.len(),
        lesion_case_count: cases.iter().filter(|c| c.mask.area() > 0).count(),
        per_case: per_case.into_iter().flatten().collect(),
        aggregate,
        frechet,
        config: MetricsConfig {
            psnr_max: DATA_RANGE,
            ms_ssim_scales: scales,
            ms_ssim_weights: MS_SSIM_WEIGHTS[..scales].to_vec(),
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            feature_extractor: extractor.name(),
            feature_dim: extractor.dim(),
            frechet_regularization: FRECHET_EPS,
        },
        missing: Vec::new(),
        seed: None,
        config_hash: None,
    })
}

/// Path of the prediction tensor for `case_id` in `pred_dir`.
pub fn prediction_path(pred_dir: &Path, case_id: &str) -> PathBuf {
    pred_dir.join(format!("{case_id}_pred.tnsr"))
}

pub fn write_prediction(pred_dir: &Path, case_id: &str, x: &ImageSlice) -> Result<()> {
    tensor_io::write_tensor(prediction_path(pred_dir, case_id), &Tensor::from_grid(x))
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::json("metrics report", e))?;
    s.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Evaluates the predictions in `pred_dir` against split `split` of the
/// dataset in `data_dir` and writes the report to `out`. Missing
/// predictions are listed in the report and then reported as an error.
/// Without `provenance`, the dataset's seed and config hash are recorded.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    pred_dir: &Path,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
    extractor: &dyn FeatureExtractor,
    provenance: Option<&Provenance>,
    out: &Path,
    exec: Exec,
) -> Result<MetricsReport> {
    let ids = manifest.split(split)?;
    let mut cases = Vec::with_capacity(ids.len());
    let mut missing = Vec::new();
    for id in ids {
        let path = prediction_path(pred_dir, id);
        if !path.exists() {
            missing.push(MissingPrediction {
                case_id: id.clone(),
                path,
            });
            continue;
        }
        let gt = phantom::load_case(data_dir, id)?;
        let pred = tensor_io::read_tensor(&path)?.to_grid()?;
        cases.push(EvalCase {
            case_id: id.clone(),
            target: gt.target,
            mask: gt.mask,
            prediction: pred,
        });
    }
    let mut report = if cases.is_empty() {
        MetricsReport {
            case_count: 0,
            lesion_case_count: 0,
            per_case: Vec::new(),
            aggregate: Vec::new(),
            frechet: Vec::new(),
            config: MetricsConfig {
                psnr_max: DATA_RANGE,
                ms_ssim_scales: 0,
                ms_ssim_weights: Vec::new(),
                ssim_window: SSIM_WINDOW,
                ssim_sigma: SSIM_SIGMA,
                feature_extractor: extractor.name(),
                feature_dim: extractor.dim(),
                frechet_regularization: FRECHET_EPS,
            },
            missing: Vec::new(),
            seed: None,
            config_hash: None,
        }
    } else {
        evaluate_cases(&cases, extractor, exec)?
    };
    report.missing = missing;
    match provenance {
        Some(p) => {
            report.seed = Some(p.seed);
            report.config_hash = Some(p.config_hash.clone());
        }
        None => {
            report.seed = Some(manifest.seed);
            report.config_hash = manifest.config_hash.clone();
        }
    }
    write_report(out, &report)?;
    if let Some(first) = report.missing.first() {
        return Err(Error::MissingPrediction {
            case_id: first.case_id.clone(),
            path: first.path.clone(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_img(c: usize, h: usize, w: usize, seed: u64) -> Grid<f32> {
        let mut r = rng::stream(&[seed, 5]);
        Grid::from_vec(c, h, w, (0..c * h * w).map(|_| r.random_range(-1.0..1.0f32)).collect()).unwrap()
    }

    fn smooth_pair(seed: u64) -> (Grid<f32>, Grid<f32>) {
        let x = rand_img(1, 64, 64, seed);
        let mut y = x.clone();
        let noise = rand_img(1, 64, 64, seed + 1);
        for (a, n) in y.data.iter_mut().zip(&noise.data) {
            *a = (*a + 0.3 * n).clamp(-1.0, 1.0);
        }
        (x, y)
    }

    #[test]
    fn mae_examples_and_oracle() {
        let x = rand_img(2, 8, 8, 1);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        let y = Grid {
            data: x.data.iter().map(|v| v + 0.1).collect(),
            ..x.clone()
        };
        assert!((mae(&x, &y).unwrap() - 0.1).abs() < 1e-6);
        let z = rand_img(2, 8, 8, 2);
        let mut s = 0.0;
        for i in 0..x.data.len() {
            s += (x.data[i] as f64 - z.data[i] as f64).abs();
        }
        let want = s / 128.0;
        assert!((mae(&x, &z).unwrap() - want).abs() <= 1e-12 * want);
        assert!(mae(&x, &rand_img(1, 8, 8, 3)).is_err());
    }

    #[test]
    fn lesion_mae_examples() {
        let x = Grid::from_vec(1, 2, 2, vec![0.5f32, 0.0, 0.0, 1.0]).unwrap();
        let y = Grid::zeros(1, 2, 2);
        let m = LesionMask::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(lesion_mae(&x, &y, &m).unwrap(), Some(0.5));
        assert_eq!(lesion_mae(&x, &y, &LesionMask::empty(2, 2)).unwrap(), None);
        let a = rand_img(2, 8, 8, 4);
        let b = rand_img(2, 8, 8, 5);
        assert_eq!(lesion_mae(&a, &b, &LesionMask::full(8, 8)).unwrap(), Some(mae(&a, &b).unwrap()));
        let bad = LesionMask::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!(lesion_mae(&x, &y, &bad).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_mse(4.0), 0.0);
        assert_eq!(psnr_from_mse(0.04), 20.0);
        let x = rand_img(1, 4, 4, 1);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        assert!(psnr_from_mse(0.01) > psnr_from_mse(0.02));
    }

    /// Direct-formula SSIM: explicit 2-D window, per-pixel statistics.
    fn ssim_oracle(a: &Grid<f32>, b: &Grid<f32>) -> f64 {
        let r = 5i64;
        let mut win = [[0.0f64; 11]; 11];
        let mut tot = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                tot += *v;
            }
        }
        let (c1, c2) = (0.0004, 0.0036);
        let mut acc = 0.0;
        let mut n = 0;
        for y in r..(a.h as i64 - r) {
            for x in r..(a.w as i64 - r) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wv = win[i][j] / tot;
                        let yy = (y + i as i64 - r) as usize;
                        let xx = (x + j as i64 - r) as usize;
                        let va = a.at(0, yy, xx) as f64;
                        let vb = b.at(0, yy, xx) as f64;
                        ma += wv * va;
                        mb += wv * vb;
                        saa += wv * va * va;
                        sbb += wv * vb * vb;
                        sab += wv * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn ms_ssim_properties() {
        assert_eq!(ms_ssim_scales(64, 64).unwrap(), 3);
        assert_eq!(ms_ssim_scales(11, 40).unwrap(), 1);
        assert_eq!(ms_ssim_scales(200, 200).unwrap(), 5);
        assert!(ms_ssim_scales(10, 64).is_err());
        let (x, y) = smooth_pair(3);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let v = ms_ssim(&x, &y).unwrap();
        assert!((-1.0..1.0).contains(&v));
        let neg = Grid {
            data: x.data.iter().map(|v| -v).collect(),
            ..x.clone()
        };
        assert!(ms_ssim(&x, &neg).unwrap() < 0.5);
        let s1 = ms_ssim_with_scales(&x, &y, 1).unwrap();
        assert!((s1 - ssim_oracle(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_transpose_invariant() {
        let (x, y) = smooth_pair(8);
        let (xt, yt) = (x.transpose(), y.transpose());
        let m = LesionMask::from_vec(64, 64, (0..4096).map(|i| ((i / 7) % 3 == 0) as u8 as f32).collect()).unwrap();
        assert!((mae(&x, &y).unwrap() - mae(&xt, &yt).unwrap()).abs() < 1e-12);
        assert!((psnr(&x, &y).unwrap() - psnr(&xt, &yt).unwrap()).abs() < 1e-9);
        assert!((ms_ssim(&x, &y).unwrap() - ms_ssim(&xt, &yt).unwrap()).abs() < 1e-9);
        let a = lesion_mae(&x, &y, &m).unwrap().unwrap();
        let b = lesion_mae(&xt, &yt, &m.transpose()).unwrap().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(&[seed, 6]);
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = rng::normal_vec(&mut r, d);
                v[0] += shift;
                v
            })
            .collect()
    }

    #[test]
    fn frechet_properties() {
        let a = gaussian_rows(500, 4, 0.0, 1);
        let b = gaussian_rows(700, 4, 0.3, 2);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab >= 0.0);
        assert!(frechet_distance(&a, &gaussian_rows(10, 3, 0.0, 3)).is_err());
    }

    #[test]
    fn frechet_mean_shift_oracle() {
        let a = gaussian_rows(100_000, 4, 0.0, 11);
        let b = gaussian_rows(100_000, 4, 1.0, 12);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 1.0).abs() <= 0.05, "{fd}");
    }

    struct MeanFeatures;

    impl FeatureExtractor for MeanFeatures {
        fn name(&self) -> String {
            "channel_means".into()
        }
        fn dim(&self) -> usize {
            2
        }
        fn features(&self, x: &ImageSlice) -> Result<Vec<f64>> {
            Ok((0..2).map(|c| x.plane(c).iter().map(|&v| v as f64).sum::<f64>()).collect())
        }
    }

    #[test]
    fn perfect_predictions_report() {
        let cases: Vec<EvalCase> = (0..4)
            .map(|i| {
                let t = rand_img(2, 64, 64, 20 + i);
                EvalCase {
                    case_id: format!("c{i}"),
                    prediction: t.clone(),
                    target: t,
                    mask: if i == 0 { LesionMask::full(64, 64) } else { LesionMask::empty(64, 64) },
                }
            })
            .collect();
        let r = evaluate_cases(&cases, &MeanFeatures, Exec::Sequential).unwrap();
        assert_eq!(r.per_case.len(), 8);
        assert_eq!(r.lesion_case_count, 1);
        for a in &r.aggregate {
            assert_eq!(a.mae, 0.0);
            assert!((a.ms_ssim - 1.0).abs() < 1e-6);
            assert_eq!(a.psnr_infinite_cases, 4);
            assert_eq!(a.psnr, None);
            assert_eq!(a.lesion_cases, 1);
        }
        assert!(r.frechet.iter().all(|f| f.frechet_feature_distance < 1e-6));
        let par = evaluate_cases(&cases, &MeanFeatures, Exec::Parallel).unwrap();
        assert_eq!(serde_json::to_string(&par).unwrap(), serde_json::to_string(&r).unwrap());
    }
}
