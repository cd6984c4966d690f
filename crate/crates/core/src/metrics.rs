//! Image-quality metrics on magnitude images: NRMSE, PSNR, and single-scale
//! SSIM, each computed per frame against a reference and averaged.
//!
//! Conventions (the usual ones, stated because they vary across papers):
//! NRMSE normalizes the magnitude RMSE by the reference magnitude range;
//! PSNR uses peak = max |ref|; SSIM uses an 11x11 Gaussian window with
//! sigma 1.5, K1 = 0.01, K2 = 0.03 and dynamic range max|ref| − min|ref|.

use crate::error::{Error, Result};
use crate::tensor::CTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub subject_id: usize,
    pub r: f64,
    pub method: String,
    pub nrmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn magnitudes(x: &CTensor) -> Vec<f64> {
    x.data().iter().map(|z| z.norm()).collect()
}

fn ref_range(mr: &[f64]) -> Result<(f64, f64)> {
    let max = mr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = mr.iter().cloned().fold(f64::INFINITY, f64::min);
    if max - min <= 0.0 {
        return Err(Error::Invalid("reference image is constant".into()));
    }
    Ok((min, max))
}

/// sqrt(mean (|x| − |ref|)²) / (max|ref| − min|ref|)
pub fn nrmse(x: &CTensor, reference: &CTensor) -> Result<f64> {
    x.check_same_shape(reference, "nrmse")?;
    let mx = magnitudes(x);
    let mr = magnitudes(reference);
    let (min, max) = ref_range(&mr)?;
    let mse: f64 = mx
        .iter()
        .zip(&mr)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / mr.len() as f64;
    Ok(mse.sqrt() / (max - min))
}

/// 10·log10(peak² / MSE) with peak = max |ref|; +∞ on exact equality.
pub fn psnr(x: &CTensor, reference: &CTensor) -> Result<f64> {
    x.check_same_shape(reference, "psnr")?;
    let mx = magnitudes(x);
    let mr = magnitudes(reference);
    let peak = mr.iter().cloned().fold(0.0, f64::max);
    let mse: f64 = mx
        .iter()
        .zip(&mr)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / mr.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for i in -half..=half {
        for j in -half..=half {
            let v = (-((i * i + j * j) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM map of one frame pair (magnitude planes, 'valid' positions with
/// the window fully inside).
fn ssim_frame(x: &[f64], r: &[f64], nx: usize, ny: usize, l: f64) -> f64 {
    let w = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let c1 = (SSIM_K1 * l) * (SSIM_K1 * l);
    let c2 = (SSIM_K2 * l) * (SSIM_K2 * l);
    let mut total = 0.0;
    let mut count = 0usize;
    for cx in half..nx - half {
        for cy in half..ny - half {
            let (mut mx, mut mr) = (0.0, 0.0);
            let mut k = 0;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let idx = (cx + i - half) * ny + (cy + j - half);
                    mx += w[k] * x[idx];
                    mr += w[k] * r[idx];
                    k += 1;
                }
            }
            let (mut vx, mut vr, mut cov) = (0.0, 0.0, 0.0);
            let mut k = 0;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let idx = (cx + i - half) * ny + (cy + j - half);
                    let dx = x[idx] - mx;
                    let dr = r[idx] - mr;
                    vx += w[k] * dx * dx;
                    vr += w[k] * dr * dr;
                    cov += w[k] * dx * dr;
                    k += 1;
                }
            }
            let num = (2.0 * mx * mr + c1) * (2.0 * cov + c2);
            let den = (mx * mx + mr * mr + c1) * (vx + vr + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Frame-averaged single-scale SSIM of [t, x, y] complex images computed on
/// their magnitudes. The dynamic range comes from the reference.
pub fn ssim(x: &CTensor, reference: &CTensor) -> Result<f64> {
    x.check_same_shape(reference, "ssim")?;
    let sh = x.shape();
    if sh.len() != 3 {
        return Err(Error::Invalid("ssim expects [t,x,y]".into()));
    }
    let (t, nx, ny) = (sh[0], sh[1], sh[2]);
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "image {nx}x{ny} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let mx = magnitudes(x);
    let mr = magnitudes(reference);
    let (min, max) = ref_range(&mr)?;
    let l = max - min;
    let per = nx * ny;
    let mut total = 0.0;
    for f in 0..t {
        total += ssim_frame(
            &mx[f * per..(f + 1) * per],
            &mr[f * per..(f + 1) * per],
            nx,
            ny,
            l,
        );
    }
    Ok(total / t as f64)
}
