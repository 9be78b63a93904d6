//! Evaluation metrics: MSE, PSNR, MS-SSIM, and decibel conversions.
//!
//! All metrics are plain functions over [B,C,H,W] tensors in the [0,1]
//! domain (clamp reconstructions first). MS-SSIM follows the five-scale
//! construction with an 11-tap Gaussian window; images too small for the
//! full pyramid drop to however many scales fit and the exponent weights are
//! renormalized.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// PSNR and MS-SSIM dB values are capped here.
pub const DB_CAP: f64 = 99.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    ShapeMismatch,
    /// min(H, W) is below the 11-pixel window, so not even one scale fits.
    TooSmall { min_dim: usize },
    /// msssim_db input outside [0,1].
    OutOfRange,
}

impl core::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricsError::ShapeMismatch => write!(f, "metric inputs must have identical shapes"),
            MetricsError::TooSmall { min_dim } => {
                write!(f, "image side {min_dim} is below the {WINDOW}-pixel ms-ssim window")
            }
            MetricsError::OutOfRange => write!(f, "ms-ssim value outside [0,1]"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// Quality of one reconstruction, plus the coded rate when known.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub msssim: f64,
    pub msssim_db: f64,
    pub bpp: Option<f64>,
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// 10 log10(peak^2 / mse), capped at [`DB_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64, MetricsError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * math::log10(peak * peak / e)).min(DB_CAP))
}

/// -10 log10(1 - v), capped at [`DB_CAP`].
pub fn msssim_db(v: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(MetricsError::OutOfRange);
    }
    if v == 1.0 {
        return Ok(DB_CAP);
    }
    Ok((-10.0 * math::log10(1.0 - v)).min(DB_CAP))
}

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, slot) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *slot = math::exp(-d * d / (2.0 * SIGMA * SIGMA));
        sum += *slot;
    }
    for slot in k.iter_mut() {
        *slot /= sum;
    }
    k
}

/// Separable valid-mode Gaussian blur; output is (h-10) x (w-10).
fn blur_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w - (WINDOW - 1);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + t];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let oh = h - (WINDOW - 1);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// 2x2 mean pool with stride 2 (trailing odd row/column dropped).
fn downsample(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let base = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (plane[base] + plane[base + 1] + plane[base + w] + plane[base + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms of one plane pair at one
/// scale.
fn plane_stats(x: &[f64], y: &[f64], h: usize, w: usize, kernel: &[f64; WINDOW]) -> (f64, f64) {
    let (mu_x, oh, ow) = blur_valid(x, h, w, kernel);
    let (mu_y, _, _) = blur_valid(y, h, w, kernel);
    let xx: Vec<f64> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let (m_xx, _, _) = blur_valid(&xx, h, w, kernel);
    let (m_yy, _, _) = blur_valid(&yy, h, w, kernel);
    let (m_xy, _, _) = blur_valid(&xy, h, w, kernel);
    let n = oh * ow;
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = m_xx[i] - mx * mx;
        let sy = m_yy[i] - my * my;
        let sxy = m_xy[i] - mx * my;
        l_sum += (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        cs_sum += (2.0 * sxy + C2) / (sx + sy + C2);
    }
    (l_sum / n as f64, cs_sum / n as f64)
}

/// Number of pyramid scales that keep the window applicable.
fn usable_scales(h: usize, w: usize) -> usize {
    let mut side = h.min(w);
    let mut scales = 0;
    while side >= WINDOW && scales < SCALE_WEIGHTS.len() {
        scales += 1;
        side /= 2;
    }
    scales
}

/// Multi-scale SSIM, per channel then averaged across channels and batch.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch);
    }
    let s = a.shape();
    assert_eq!(s.len(), 4, "ms_ssim expects [B,C,H,W]");
    let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let scales = usable_scales(h, w);
    if scales == 0 {
        return Err(MetricsError::TooSmall { min_dim: h.min(w) });
    }
    let weight_sum: f64 = SCALE_WEIGHTS[..scales].iter().sum();
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    for bi in 0..batch {
        for ci in 0..ch {
            let base = (bi * ch + ci) * h * w;
            let mut px = a.data()[base..base + h * w].to_vec();
            let mut py = b.data()[base..base + h * w].to_vec();
            let (mut ph, mut pw) = (h, w);
            let mut value = 1.0;
            for scale in 0..scales {
                let (l, cs) = plane_stats(&px, &py, ph, pw, &kernel);
                let weight = SCALE_WEIGHTS[scale] / weight_sum;
                let term = if scale + 1 == scales { l * cs } else { cs };
                // Structure terms can dip below zero on pathological pairs;
                // clamp before the fractional power.
                value *= math::powf(term.max(0.0), weight);
                if scale + 1 < scales {
                    let (nx, nh, nw) = downsample(&px, ph, pw);
                    let (ny, _, _) = downsample(&py, ph, pw);
                    px = nx;
                    py = ny;
                    ph = nh;
                    pw = nw;
                }
            }
            total += value;
        }
    }
    Ok((total / (batch * ch) as f64).clamp(0.0, 1.0))
}

/// Bundle every metric for one image pair.
pub fn quality(x: &Tensor, xh: &Tensor, bpp: Option<f64>) -> Result<QualityReport, MetricsError> {
    let m = mse(x, xh)?;
    let p = psnr(x, xh, 1.0)?;
    let ms = ms_ssim(x, xh)?;
    Ok(QualityReport { mse: m, psnr_db: p, msssim: ms, msssim_db: msssim_db(ms)?, bpp })
}
