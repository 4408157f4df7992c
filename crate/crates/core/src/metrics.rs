//! Fusion quality metrics on 8-bit-scale grayscale planes: two-reference
//! PSNR, feature mutual information (FMI) and the Chen-Varshney perceptual
//! distortion `Q_cv`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// PSNR reported when the fused image equals both sources.
pub const PSNR_CAP_DB: f64 = 99.0;

const PEAK: f64 = 255.0;

/// Grayscale intensities on the `[0, 255]` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::BadLength {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at `(x, y)` with coordinates clamped into the plane.
    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y)
    }

    pub fn flip_horizontal(&self) -> Plane {
        Plane::from_fn(self.width, self.height, |x, y| self.at(self.width - 1 - x, y))
    }
}

fn check_sizes(fused: &Plane, a: &Plane, b: &Plane) -> Result<()> {
    for other in [a, b] {
        if (other.width, other.height) != (fused.width, fused.height) {
            return Err(Error::Config(alloc::format!(
                "image sizes differ: {}x{} vs {}x{}",
                fused.width,
                fused.height,
                other.width,
                other.height
            )));
        }
    }
    Ok(())
}

fn mse(x: &Plane, y: &Plane) -> f64 {
    x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the fused image equals both sources and `db` is the cap.
    pub identical: bool,
}

/// `10 log10(255^2 / m)` where `m` is the mean of `MSE(F, A)` and `MSE(F, B)`.
pub fn psnr_fusion(fused: &Plane, a: &Plane, b: &Plane) -> Result<Psnr> {
    check_sizes(fused, a, b)?;
    let m = 0.5 * (mse(fused, a) + mse(fused, b));
    if m == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            identical: true,
        });
    }
    Ok(Psnr {
        db: 10.0 * math::log10(PEAK * PEAK / m),
        identical: false,
    })
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(p: &Plane) -> Plane {
    Plane::from_fn(p.width, p.height, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let v = |dx: isize, dy: isize| p.clamped(x + dx, y + dy);
        let gx = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
        let gy = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
        math::sqrt(gx * gx + gy * gy)
    })
}

/// Bin index of every value, each image quantized over its own `[min, max]`.
/// `None` for a constant image.
fn quantize(p: &Plane, bins: usize) -> Option<Vec<usize>> {
    let (lo, hi) = p
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi <= lo {
        return None;
    }
    let scale = bins as f64 / (hi - lo);
    Some(
        p.data
            .iter()
            .map(|&v| ((math::floor((v - lo) * scale)) as usize).min(bins - 1))
            .collect(),
    )
}

/// Mutual information (nats) from a joint histogram with `bins` levels per
/// axis. Zero when either image is constant.
pub fn mutual_information(x: &Plane, y: &Plane, bins: usize) -> f64 {
    let (Some(qx), Some(qy)) = (quantize(x, bins), quantize(y, bins)) else {
        return 0.0;
    };
    let n = qx.len() as f64;
    let mut joint = vec![0u32; bins * bins];
    let mut mx = vec![0u32; bins];
    let mut my = vec![0u32; bins];
    for (&i, &j) in qx.iter().zip(&qy) {
        joint[i * bins + j] += 1;
        mx[i] += 1;
        my[j] += 1;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        if mx[i] == 0 {
            continue;
        }
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * math::ln(pxy * n * n / (mx[i] as f64 * my[j] as f64));
        }
    }
    mi.max(0.0)
}

pub const FMI_BINS: usize = 256;

/// `MI(grad F, grad A) + MI(grad F, grad B)` on Sobel magnitude features.
pub fn fmi(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    check_sizes(fused, a, b)?;
    let ff = sobel_magnitude(fused);
    let fa = sobel_magnitude(a);
    let fb = sobel_magnitude(b);
    Ok(mutual_information(&ff, &fa, FMI_BINS) + mutual_information(&ff, &fb, FMI_BINS))
}

/// Parameters of the Chen-Varshney measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcvConfig {
    /// Side of the square regions the image is partitioned into.
    pub region: usize,
    /// Exponent applied to the edge magnitude when forming region saliency.
    pub exponent: f64,
    /// Centre and surround widths of the difference-of-Gaussians filter
    /// standing in for the contrast sensitivity function.
    pub sigma_center: f64,
    pub sigma_surround: f64,
}

impl Default for QcvConfig {
    fn default() -> Self {
        Self {
            region: 16,
            exponent: 1.0,
            sigma_center: 1.0,
            sigma_surround: 2.0,
        }
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = math::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    let k = gaussian_taps(sigma);
    let r = (k.len() / 2) as isize;
    let rows = Plane::from_fn(p.width, p.height, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * p.clamped(x as isize + i as isize - r, y as isize))
            .sum()
    });
    Plane::from_fn(p.width, p.height, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows.clamped(x as isize, y as isize + i as isize - r))
            .sum()
    })
}

/// Band-pass (difference of Gaussians) response of `p`.
pub fn contrast_filter(p: &Plane, cfg: &QcvConfig) -> Plane {
    let c = gaussian_blur(p, cfg.sigma_center);
    let s = gaussian_blur(p, cfg.sigma_surround);
    Plane {
        width: p.width,
        height: p.height,
        data: c.data.iter().zip(&s.data).map(|(a, b)| a - b).collect(),
    }
}

/// Per-region saliency and distortion for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTerms {
    pub saliency: Vec<f64>,
    pub distortion: Vec<f64>,
}

fn region_terms(source: &Plane, fused: &Plane, cfg: &QcvConfig) -> RegionTerms {
    let edges = sobel_magnitude(source);
    let diff = Plane {
        width: source.width,
        height: source.height,
        data: source.data.iter().zip(&fused.data).map(|(s, f)| s - f).collect(),
    };
    let filtered = contrast_filter(&diff, cfg);
    let r = cfg.region;
    let (rw, rh) = (source.width.div_ceil(r), source.height.div_ceil(r));
    let mut saliency = vec![0.0; rw * rh];
    let mut energy = vec![0.0; rw * rh];
    let mut count = vec![0usize; rw * rh];
    for y in 0..source.height {
        for x in 0..source.width {
            let k = (y / r) * rw + x / r;
            let g = edges.at(x, y);
            saliency[k] += if cfg.exponent == 1.0 { g } else { math::powf(g, cfg.exponent) };
            let e = filtered.at(x, y);
            energy[k] += e * e;
            count[k] += 1;
        }
    }
    let distortion = energy.iter().zip(&count).map(|(e, &c)| e / c as f64).collect();
    RegionTerms { saliency, distortion }
}

/// Saliency-weighted average of regional distortions of both sources.
pub fn qcv_from_terms(a: &RegionTerms, b: &RegionTerms) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..a.saliency.len() {
        num += a.saliency[k] * a.distortion[k] + b.saliency[k] * b.distortion[k];
        den += a.saliency[k] + b.saliency[k];
    }
    if den == 0.0 {
        log::warn!("Q_cv: both sources have zero saliency everywhere; reporting 0");
        return 0.0;
    }
    num / den
}

pub fn qcv(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    qcv_with(fused, a, b, &QcvConfig::default())
}

pub fn qcv_with(fused: &Plane, a: &Plane, b: &Plane, cfg: &QcvConfig) -> Result<f64> {
    check_sizes(fused, a, b)?;
    if fused.width < cfg.region || fused.height < cfg.region {
        return Err(Error::TooSmall {
            height: fused.height,
            width: fused.width,
            min: cfg.region,
        });
    }
    Ok(qcv_from_terms(&region_terms(a, fused, cfg), &region_terms(b, fused, cfg)))
}

/// Metrics of one `(source A, source B, fused)` triple.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairMetrics {
    pub name: String,
    pub psnr: f64,
    pub psnr_identical: bool,
    pub fmi: f64,
    pub qcv: f64,
}

pub fn evaluate_triple(name: impl Into<String>, fused: &Plane, a: &Plane, b: &Plane) -> Result<PairMetrics> {
    let p = psnr_fusion(fused, a, b)?;
    Ok(PairMetrics {
        name: name.into(),
        psnr: p.db,
        psnr_identical: p.identical,
        fmi: fmi(fused, a, b)?,
        qcv: qcv(fused, a, b)?,
    })
}

/// Per-pair metrics and their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub psnr: f64,
    pub fmi: f64,
    pub qcv: f64,
    pub per_pair: Vec<PairMetrics>,
}

impl MetricReport {
    pub fn from_pairs(per_pair: Vec<PairMetrics>) -> Self {
        let n = per_pair.len().max(1) as f64;
        let mean = |f: fn(&PairMetrics) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: mean(|p| p.psnr),
            fmi: mean(|p| p.fmi),
            qcv: mean(|p| p.qcv),
            per_pair,
        }
    }
}
