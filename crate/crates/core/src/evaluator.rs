//! Reconstruction and generation metrics and latent-collapse diagnostics.
//!
//! Distribution distances use a small frozen convolutional extractor with a
//! fixed seed, so values are comparable across runs of this crate but not
//! with Inception-based scores.

use jointok_autograd::{Graph, ParamStore, Scalar, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generator::{sample, Guidance, SampleOptions};
use crate::nn::{component_rng, Conv, Ctx, Init};
use crate::objectives::PerceptualNet;
use crate::quantizer::{code_usage, histogram};
use crate::trainer::{ArView, TokenizerView};

const EXTRACTOR_SEED: u64 = 0xfe47_0e57;
pub const PSNR_MAX_DB: f64 = 100.0;
const FRECHET_EPS: f64 = 1e-6;
const CHUNK: usize = 64;

/// Frozen conv stack (16, 32, 32 channels, stride 2) pooled onto a 2×2 grid: 128 features.
pub struct FeatureExtractor<T: Scalar> {
    store: ParamStore<T>,
    layers: Vec<Conv>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(channels: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = component_rng(EXTRACTOR_SEED, "feature-extractor");
        let mut init = Init::new(&mut store, &mut rng);
        let layers = vec![
            init.conv("c0", channels, 16, 3, 2, 1),
            init.conv("c1", 16, 32, 3, 2, 1),
            init.conv("c2", 32, 32, 3, 2, 1),
        ];
        Self { store, layers }
    }

    pub fn dim(&self) -> usize {
        4 * self.layers.last().map(|c| c.cout).unwrap_or(0)
    }

    /// One feature row per image of `[B, H, W, C]`.
    pub fn features(&self, images: &Tensor<T>) -> Vec<Vec<f64>> {
        let b = images.dim(0);
        let mut out = Vec::with_capacity(b);
        for start in (0..b).step_by(CHUNK) {
            let n = CHUNK.min(b - start);
            let g = Graph::inference();
            let cx = Ctx::frozen(&g, &self.store);
            let mut h = g.constant(images.narrow(0, start, n));
            for layer in &self.layers {
                h = layer.forward(&cx, h).leaky_relu(0.2);
            }
            let v = h.value();
            let (gh, gw, c) = (v.dim(1), v.dim(2), v.dim(3));
            let data = v.data();
            for i in 0..n {
                let mut row = vec![0.0; 4 * c];
                for y in 0..gh {
                    for x in 0..gw {
                        // cell of the 2x2 pooling grid
                        let cell = (2 * y / gh.max(1)).min(1) * 2 + (2 * x / gw.max(1)).min(1);
                        let base = ((i * gh + y) * gw + x) * c;
                        for ch in 0..c {
                            row[cell * c + ch] += data[base + ch].as_f64();
                        }
                    }
                }
                let counts = cell_counts(gh, gw);
                for (cell, &cnt) in counts.iter().enumerate() {
                    for ch in 0..c {
                        row[cell * c + ch] /= cnt.max(1) as f64;
                    }
                }
                out.push(row);
            }
        }
        out
    }
}

fn cell_counts(gh: usize, gw: usize) -> [usize; 4] {
    let mut counts = [0; 4];
    for y in 0..gh {
        for x in 0..gw {
            counts[(2 * y / gh.max(1)).min(1) * 2 + (2 * x / gw.max(1)).min(1)] += 1;
        }
    }
    counts
}

/// Mean and covariance of a feature population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStatistics {
    pub mean: Vec<f64>,
    /// row-major `D × D`, symmetric
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl FeatureStatistics {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).ok_or(Error::Empty("feature rows"))?;
        let mut acc = FeatureAccumulator::new(dim);
        for r in rows {
            acc.push(r)?;
        }
        acc.finish()
    }
}

/// Streaming sums; merging accumulators in any order gives the same statistics
/// up to floating point reassociation.
#[derive(Clone, Debug)]
pub struct FeatureAccumulator {
    dim: usize,
    count: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl FeatureAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, count: 0, sum: vec![0.0; dim], outer: vec![0.0; dim * dim] }
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch(format!("feature row of {} values, expected {}", row.len(), self.dim)));
        }
        self.count += 1;
        for i in 0..self.dim {
            self.sum[i] += row[i];
            for j in i..self.dim {
                self.outer[i * self.dim + j] += row[i] * row[j];
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch("accumulators of different width".into()));
        }
        self.count += other.count;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.outer.iter_mut().zip(&other.outer).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Unbiased covariance; needs at least `D + 1` samples.
    pub fn finish(&self) -> Result<FeatureStatistics> {
        let d = self.dim;
        if self.count < d + 1 {
            return Err(Error::OutOfRange {
                what: "sample count",
                detail: format!("{} samples cannot estimate a {d}x{d} covariance (need at least {})", self.count, d + 1),
            });
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let c = (self.outer[i * d + j] - n * mean[i] * mean[j]) / (n - 1.0);
                cov[i * d + j] = c;
                cov[j * d + i] = c;
            }
        }
        Ok(FeatureStatistics { mean, covariance: cov, count: self.count })
    }
}

/// Fréchet distance plus whether the εI regularization had to be applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetDistance {
    pub value: f64,
    pub regularized: bool,
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let ok = eig.eigenvalues.iter().all(|v| v.is_finite() && *v >= -1e-8 * scale);
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()));
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), ok)
}

fn trace_sqrt(m: &DMatrix<f64>) -> (f64, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let ok = eig.eigenvalues.iter().all(|v| v.is_finite());
    (eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum(), ok)
}

/// `Tr((Σa Σb)^{1/2})` evaluated as `Tr((√Σa Σb √Σa)^{1/2})`.
fn cross_term(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, bool) {
    let (ra, ok_a) = psd_sqrt(a);
    let (t, ok_t) = trace_sqrt(&(&ra * b * &ra));
    (t, ok_a && ok_t)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, symmetric in its arguments.
pub fn frechet_distance_detailed(a: &FeatureStatistics, b: &FeatureStatistics) -> Result<FrechetDistance> {
    let d = a.dim();
    if b.dim() != d || a.covariance.len() != d * d || b.covariance.len() != d * d {
        return Err(Error::DimensionMismatch(format!("feature statistics of width {d} and {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let mut sa = DMatrix::from_row_slice(d, d, &a.covariance);
    let mut sb = DMatrix::from_row_slice(d, d, &b.covariance);
    let mut regularized = false;
    let (mut ab, ok1) = cross_term(&sa, &sb);
    let (mut ba, ok2) = cross_term(&sb, &sa);
    if !(ok1 && ok2 && ab.is_finite() && ba.is_finite()) {
        regularized = true;
        let eps = DMatrix::identity(d, d) * FRECHET_EPS;
        sa += &eps;
        sb += &eps;
        ab = cross_term(&sa, &sb).0;
        ba = cross_term(&sb, &sa).0;
    }
    // averaging both orders makes the result exactly symmetric
    let cross = 0.5 * (ab + ba);
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::DegenerateInput("Fréchet distance is not finite".into()));
    }
    Ok(FrechetDistance { value: value.max(0.0), regularized })
}

pub fn frechet_distance(a: &FeatureStatistics, b: &FeatureStatistics) -> Result<f64> {
    Ok(frechet_distance_detailed(a, b)?.value)
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::Empty("image tensor"));
    }
    Ok(())
}

/// `10·log10(4 / MSE)` for pixels in [-1, 1], capped at [`PSNR_MAX_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_MAX_DB;
    }
    (10.0 * (4.0 / mse).log10()).min(PSNR_MAX_DB)
}

pub const SSIM_WINDOW: usize = 7;
/// `(0.01·2)²` and `(0.03·2)²` for a dynamic range of 2.
pub const SSIM_C1: f64 = 0.0004;
pub const SSIM_C2: f64 = 0.0036;

/// Summed-area table with a zero border, `(h+1) × (w+1)`.
fn integral(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
}

/// Mean SSIM of one `h × w` channel pair with uniform `k × k` windows and population variances.
pub fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW.min(h).min(w);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let sa = integral(a, h, w);
    let sb = integral(b, h, w);
    let saa = integral(&prod(&|x, _| x * x), h, w);
    let sbb = integral(&prod(&|_, y| y * y), h, w);
    let sab = integral(&prod(&|x, y| x * y), h, w);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let ma = window_sum(&sa, w, y, x, k) / n;
            let mb = window_sum(&sb, w, y, x, k) / n;
            let va = window_sum(&saa, w, y, x, k) / n - ma * ma;
            let vb = window_sum(&sbb, w, y, x, k) / n - mb * mb;
            let cov = window_sum(&sab, w, y, x, k) / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over images and channels of `[B, H, W, C]` tensors.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    if a.rank() != 4 {
        return Err(Error::DimensionMismatch(format!("SSIM expects [B, H, W, C], got {:?}", a.shape())));
    }
    let (n, h, w, c) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for i in 0..n {
        for ch in 0..c {
            let plane = |d: &[T]| -> Vec<f64> { (0..h * w).map(|p| d[(i * h * w + p) * c + ch].as_f64()).collect() };
            total += ssim_channel(&plane(ad), &plane(bd), h, w);
        }
    }
    Ok(total / (n * c) as f64)
}

/// Real-data reference: feature statistics plus one feature centroid per class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RealReference {
    pub stats: FeatureStatistics,
    pub centroids: Vec<Vec<f64>>,
}

impl RealReference {
    pub fn new<T: Scalar>(extractor: &FeatureExtractor<T>, data: &Dataset<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("reference dataset"));
        }
        let mut acc = FeatureAccumulator::new(extractor.dim());
        let mut sums = vec![vec![0.0; extractor.dim()]; data.num_classes];
        let mut counts = vec![0usize; data.num_classes];
        for start in (0..data.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
            let batch = data.gather(&idx);
            for (row, &label) in extractor.features(&batch.pixels).iter().zip(&batch.labels) {
                acc.push(row)?;
                sums[label].iter_mut().zip(row).for_each(|(s, v)| *s += v);
                counts[label] += 1;
            }
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| if c == 0 { s } else { s.into_iter().map(|v| v / c as f64).collect() })
            .collect();
        Ok(Self { stats: acc.finish()?, centroids })
    }

    /// Index of the nearest class centroid.
    pub fn classify(&self, row: &[f64]) -> usize {
        let dist = |c: &Vec<f64>| c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.centroids.len()).min_by(|&i, &j| dist(&self.centroids[i]).total_cmp(&dist(&self.centroids[j]))).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    /// distribution distance of reconstructions to their inputs; absent with too few images
    pub rfid: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub mse: f64,
    pub images: usize,
}

/// Full-prefix reconstruction metrics over `data`.
pub fn eval_reconstruction<T: Scalar>(
    view: &TokenizerView<'_, T>,
    data: &Dataset<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<ReconMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let perceptual = PerceptualNet::<T>::new(data.channels);
    let mut real = FeatureAccumulator::new(extractor.dim());
    let mut fake = FeatureAccumulator::new(extractor.dim());
    let (mut psnr_sum, mut ssim_sum, mut perc_sum, mut mse_sum) = (0.0, 0.0, 0.0, 0.0);
    for start in (0..data.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
        let x = data.gather(&idx).pixels;
        let x_hat = view.reconstruct(&x, view.num_tokens())?;
        for i in 0..idx.len() {
            let (a, b) = (x.narrow(0, i, 1), x_hat.narrow(0, i, 1));
            let mse = a.data().iter().zip(b.data()).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum::<f64>() / a.numel() as f64;
            mse_sum += mse;
            psnr_sum += psnr_from_mse(mse);
            ssim_sum += ssim(&a, &b)?;
        }
        let g = Graph::inference();
        perc_sum += perceptual.distance(&g, g.constant(x_hat.clone()), g.constant(x.clone())).item().as_f64() * idx.len() as f64;
        for r in extractor.features(&x) {
            real.push(&r)?;
        }
        for r in extractor.features(&x_hat) {
            fake.push(&r)?;
        }
    }
    let n = data.len() as f64;
    let rfid = match (real.finish(), fake.finish()) {
        (Ok(a), Ok(b)) => Some(frechet_distance(&a, &b)?),
        _ => None,
    };
    Ok(ReconMetrics { rfid, psnr: psnr_sum / n, ssim: ssim_sum / n, perceptual: perc_sum / n, mse: mse_sum / n, images: data.len() })
}

/// Guidance selection for evaluation and sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GuidanceSpec {
    None,
    Cfg(f64),
    Auto(f64),
}

impl GuidanceSpec {
    /// Parses `none`, `cfg:<s>` or `auto:<s>`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::InvalidValue { key: "guidance".into(), reason: format!("`{text}` is not none, cfg:<scale> or auto:<scale>") };
        if text == "none" {
            return Ok(GuidanceSpec::None);
        }
        let (kind, scale) = text.split_once(':').ok_or_else(bad)?;
        let s: f64 = scale.parse().map_err(|_| bad())?;
        if !s.is_finite() {
            return Err(bad());
        }
        match kind {
            "cfg" => Ok(GuidanceSpec::Cfg(s)),
            "auto" => Ok(GuidanceSpec::Auto(s)),
            _ => Err(bad()),
        }
    }

    pub fn resolve<'a, T: Scalar>(&self, aux: Option<ArView<'a, T>>) -> Result<Guidance<'a, T>> {
        Ok(match *self {
            GuidanceSpec::None => Guidance::None,
            GuidanceSpec::Cfg(s) => Guidance::Cfg(s),
            GuidanceSpec::Auto(s) => {
                let aux = aux.ok_or(Error::MissingAuxModel)?;
                Guidance::Auto { scale: s, model: aux.model, store: aux.store }
            }
        })
    }
}

/// `count` labels cycling through the classes.
pub fn balanced_labels(count: usize, num_classes: usize) -> Vec<usize> {
    (0..count).map(|i| i % num_classes.max(1)).collect()
}

/// Samples `labels.len()` sequences in chunks and decodes them to images.
pub fn generate_images<T: Scalar>(
    tok: &TokenizerView<'_, T>,
    ar: &ArView<'_, T>,
    guidance: &Guidance<'_, T>,
    labels: &[usize],
    opts: &SampleOptions,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::Empty("sample labels"));
    }
    let mut images = Vec::new();
    let mut all_ids = Vec::new();
    for (i, chunk) in labels.chunks(CHUNK).enumerate() {
        let o = SampleOptions { seed: opts.seed.wrapping_add(i as u64), ..opts.clone() };
        let ids: Vec<usize> = sample(ar.model, ar.store, chunk, &o, guidance)?.into_iter().flatten().collect();
        images.push(tok.decode_ids(&ids, tok.num_tokens())?);
        all_ids.extend(ids);
    }
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    Ok((Tensor::concat(&refs, 0), all_ids))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    pub gfid: f64,
    pub regularized: bool,
    /// fraction of classes that are the nearest centroid of at least one sample
    pub class_coverage: f64,
    /// fraction of samples whose nearest real centroid is their requested class
    pub class_match: f64,
    pub samples: usize,
}

/// Metrics of already generated images against the real reference.
pub fn generation_metrics<T: Scalar>(
    images: &Tensor<T>,
    labels: &[usize],
    extractor: &FeatureExtractor<T>,
    reference: &RealReference,
) -> Result<GenMetrics> {
    let rows = extractor.features(images);
    if rows.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} images for {} labels", rows.len(), labels.len())));
    }
    let stats = FeatureStatistics::from_rows(&rows)?;
    let fd = frechet_distance_detailed(&stats, &reference.stats)?;
    let k = reference.centroids.len();
    let mut hit = vec![false; k];
    let mut matches = 0usize;
    for (row, &label) in rows.iter().zip(labels) {
        let c = reference.classify(row);
        hit[c] = true;
        matches += (c == label) as usize;
    }
    Ok(GenMetrics {
        gfid: fd.value,
        regularized: fd.regularized,
        class_coverage: hit.iter().filter(|&&h| h).count() as f64 / k.max(1) as f64,
        class_match: matches as f64 / labels.len() as f64,
        samples: labels.len(),
    })
}

/// Samples `num_samples` class-balanced images and scores them against `reference`.
#[allow(clippy::too_many_arguments)]
pub fn eval_generation<T: Scalar>(
    tok: &TokenizerView<'_, T>,
    ar: &ArView<'_, T>,
    guidance: &Guidance<'_, T>,
    num_samples: usize,
    num_classes: usize,
    opts: &SampleOptions,
    extractor: &FeatureExtractor<T>,
    reference: &RealReference,
) -> Result<GenMetrics> {
    if num_samples < extractor.dim() + 1 {
        return Err(Error::OutOfRange {
            what: "sample count",
            detail: format!("{num_samples} samples cannot estimate a {0}x{0} covariance", extractor.dim()),
        });
    }
    let labels = balanced_labels(num_samples, num_classes);
    let (images, _) = generate_images(tok, ar, guidance, &labels, opts)?;
    generation_metrics(&images, &labels, extractor, reference)
}

/// Token-usage statistics and PCA coordinates for the collapse diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub histogram: Vec<u64>,
    pub total_tokens: u64,
    pub usage: f64,
    pub top1_share: f64,
    /// ℓ2-normalized codebook rows on their top three principal axes, `K × 3`
    pub codebook_pca: Vec<[f64; 3]>,
    /// ℓ2-normalized latents on the same axes
    pub latent_pca: Vec<[f64; 3]>,
}

fn normalized_rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    t.rows()
        .map(|r| {
            let v: Vec<f64> = r.iter().map(|x| x.as_f64()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Principal axes (descending variance) of `rows` and their mean.
fn principal_axes(rows: &[Vec<f64>], count: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let c = DVector::from_iterator(d, r.iter().zip(&mean).map(|(a, m)| a - m));
        cov += &c * c.transpose();
    }
    let eig = SymmetricEigen::new(cov / n.max(1.0));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = order.into_iter().take(count).map(|i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    (mean, axes)
}

fn project(rows: &[Vec<f64>], mean: &[f64], axes: &[Vec<f64>]) -> Vec<[f64; 3]> {
    rows.iter()
        .map(|r| {
            let mut p = [0.0; 3];
            for (k, axis) in axes.iter().enumerate().take(3) {
                p[k] = r.iter().zip(mean).zip(axis).map(|((x, m), a)| (x - m) * a).sum();
            }
            p
        })
        .collect()
}

/// Builds the report from code ids, the `K × d` codebook and optional `[.., d]` latents.
pub fn collapse_report<T: Scalar>(ids: &[usize], codebook: &Tensor<T>, latents: Option<&Tensor<T>>) -> Result<CollapseReport> {
    let k = codebook.dim(0);
    let hist = histogram(ids, k)?;
    let usage = code_usage(ids, k)?;
    let top1 = *hist.iter().max().unwrap_or(&0) as f64 / ids.len() as f64;
    let rows = normalized_rows(codebook);
    let (mean, axes) = principal_axes(&rows, 3);
    let codebook_pca = project(&rows, &mean, &axes);
    let latent_pca = latents.map(|z| project(&normalized_rows(z), &mean, &axes)).unwrap_or_default();
    Ok(CollapseReport { histogram: hist, total_tokens: ids.len() as u64, usage, top1_share: top1, codebook_pca, latent_pca })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_width() {
        let e = FeatureExtractor::<f64>::new(3);
        assert_eq!(e.dim(), 128);
        let x = Tensor::zeros(vec![2, 32, 32, 3]);
        let f = e.features(&x);
        assert_eq!((f.len(), f[0].len()), (2, 128));
        let small = e.features(&Tensor::<f64>::zeros(vec![1, 16, 16, 3]));
        assert_eq!(small[0].len(), 128);
    }

    #[test]
    fn psnr_cap_and_ssim_identity() {
        let x = Tensor::<f64>::from_f64(vec![1, 8, 8, 3], &(0..192).map(|i| (i as f64 / 96.0) - 1.0).collect::<Vec<_>>());
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_MAX_DB);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_spec_parsing() {
        assert_eq!(GuidanceSpec::parse("cfg:1.5").unwrap(), GuidanceSpec::Cfg(1.5));
        assert_eq!(GuidanceSpec::parse("auto:2").unwrap(), GuidanceSpec::Auto(2.0));
        assert_eq!(GuidanceSpec::parse("none").unwrap(), GuidanceSpec::None);
        assert!(GuidanceSpec::parse("cfg").is_err());
        assert!(matches!(GuidanceSpec::Auto(1.0).resolve::<f64>(None), Err(Error::MissingAuxModel)));
    }

    #[test]
    fn collapse_examples() {
        let cb = Tensor::<f64>::from_f64(vec![4, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let uniform: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let r = collapse_report(&uniform, &cb, None).unwrap();
        assert_eq!((r.usage, r.top1_share), (1.0, 0.25));
        assert_eq!(r.histogram.iter().sum::<u64>(), 400);
        let skewed: Vec<usize> = (0..100).map(|i| if i < 90 { 0 } else { 1 + i % 3 }).collect();
        assert!((collapse_report(&skewed, &cb, None).unwrap().top1_share - 0.9).abs() < 1e-12);
    }
}
