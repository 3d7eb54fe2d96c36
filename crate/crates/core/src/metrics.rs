//! PSNR and SSIM on 8-bit images.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{luminance, ImageBuffer};
use crate::tensor::{Element, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    Dimensions { a: (usize, usize, usize), b: (usize, usize, usize) },
    #[error("image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall { width: usize, height: usize },
    #[error("{0}")]
    Invalid(String),
}

fn dims(img: &ImageBuffer) -> (usize, usize, usize) {
    (img.width, img.height, img.channels)
}

fn same_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if dims(a) != dims(b) {
        return Err(MetricError::Dimensions { a: dims(a), b: dims(b) });
    }
    Ok(())
}

/// `10 log10(max^2 / MSE)` on raw samples, capped at 100 dB.
pub fn psnr_samples(a: &[f64], b: &[f64], max_val: f64) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::Invalid(format!("psnr over {} and {} samples", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// PSNR over all channels of two 8-bit images, peak 255.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let fa: Vec<f64> = a.pixels.iter().map(|&p| p as f64).collect();
    let fb: Vec<f64> = b.pixels.iter().map(|&p| p as f64).collect();
    psnr_samples(&fa, &fb, L)
}

/// PSNR of two [0, 1] tensors after 8-bit quantization of sample 0.
pub fn psnr_tensors<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, MetricError> {
    let q = |t: &Tensor<T>| ImageBuffer::from_tensor(t).map_err(|e| MetricError::Invalid(e.to_string()));
    psnr(&q(a)?, &q(b)?)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter over every fully contained window.
fn filter_valid(x: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(k, t)| t * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps.iter().enumerate().map(|(k, t)| t * rows[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel planes on the 0..255 scale.
pub fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, MetricError> {
    if a.len() != width * height || b.len() != width * height {
        return Err(MetricError::Invalid(format!(
            "ssim planes of {} and {} samples for {width}x{height}",
            a.len(),
            b.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricError::TooSmall { width, height });
    }
    let taps = gaussian_taps();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, width, height, &taps);
    let mu_b = filter_valid(b, width, height, &taps);
    let e_aa = filter_valid(&prod(|x, _| x * x), width, height, &taps);
    let e_bb = filter_valid(&prod(|_, y| y * y), width, height, &taps);
    let e_ab = filter_valid(&prod(|x, y| x * y), width, height, &taps);
    let (c1, c2) = ((K1 * L).powi(2), (K2 * L).powi(2));
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two 8-bit images; color images are compared on BT.601 luma.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    ssim_plane(&luminance(a), &luminance(b), a.width, a.height)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityRow {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
}

impl QualityReport {
    pub fn push(&mut self, image: impl Into<String>, psnr_db: f64, ssim: f64) {
        self.rows.push(QualityRow { image: image.into(), psnr_db, ssim });
    }

    /// Scores a restored image against its reference.
    pub fn evaluate(
        &mut self,
        image: impl Into<String>,
        reference: &ImageBuffer,
        restored: &ImageBuffer,
    ) -> Result<(), MetricError> {
        let p = psnr(reference, restored)?;
        let s = ssim(reference, restored)?;
        self.push(image, p, s);
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// `image,psnr_db,ssim` rows and a trailing `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.6}", csv_field(&r.image), r.psnr_db, r.ssim);
        }
        let _ = writeln!(s, "MEAN,{:.4},{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
