//! PNG export of reconstructions: per-frame x–y magnitude images, a y–t
//! profile through one column, and 5×-scaled relative error maps.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::CTensor;

pub const ERROR_MAP_SCALE: f64 = 5.0;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn mag_frame(x: &CTensor, t: usize) -> Vec<f64> {
    let (nx, ny) = (x.shape()[1], x.shape()[2]);
    let base = t * nx * ny;
    x.data()[base..base + nx * ny]
        .iter()
        .map(|z| z.norm())
        .collect()
}

fn save_gray(path: &Path, w: usize, h: usize, px: &[f64]) -> Result<()> {
    let mut img = GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, Luma([to_u8(px[r * w + c])]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn check_cine(x: &CTensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [t, nx, ny] => Ok((*t, *nx, *ny)),
        other => Err(Error::Invalid(format!(
            "export expects a [t,x,y] image, got {other:?}"
        ))),
    }
}

/// One PNG per frame, magnitudes normalized jointly over the whole cine so
/// frames are comparable.
pub fn export_frames(x: &CTensor, dir: &Path, stem: &str) -> Result<()> {
    let (t, nx, ny) = check_cine(x)?;
    std::fs::create_dir_all(dir)?;
    let peak = x.max_abs().max(f64::MIN_POSITIVE);
    for f in 0..t {
        let px: Vec<f64> = mag_frame(x, f).iter().map(|m| m / peak).collect();
        save_gray(&dir.join(format!("{stem}_frame{f:03}.png")), ny, nx, &px)?;
    }
    Ok(())
}

/// Temporal profile through one image column: t rows × y columns.
pub fn export_yt_profile(x: &CTensor, dir: &Path, stem: &str, column: usize) -> Result<()> {
    let (t, nx, ny) = check_cine(x)?;
    if column >= nx {
        return Err(Error::Invalid(format!(
            "profile column {column} out of range (nx = {nx})"
        )));
    }
    std::fs::create_dir_all(dir)?;
    let peak = x.max_abs().max(f64::MIN_POSITIVE);
    let mut px = Vec::with_capacity(t * ny);
    for f in 0..t {
        for y in 0..ny {
            px.push(x.at(&[f, column, y]).norm() / peak);
        }
    }
    save_gray(&dir.join(format!("{stem}_yt_col{column}.png")), ny, t, &px)
}

/// |x′ − ref| · scale / max|ref| per frame; exact agreement renders black.
pub fn export_error_maps(x: &CTensor, reference: &CTensor, dir: &Path, stem: &str) -> Result<()> {
    let (t, nx, ny) = check_cine(x)?;
    x.check_same_shape(reference, "error map")?;
    std::fs::create_dir_all(dir)?;
    let peak = reference.max_abs();
    if peak <= 0.0 {
        return Err(Error::Invalid("reference image is identically zero".into()));
    }
    for f in 0..t {
        let xm = mag_frame(x, f);
        let rm = mag_frame(reference, f);
        let px: Vec<f64> = xm
            .iter()
            .zip(&rm)
            .map(|(a, b)| (a - b).abs() * ERROR_MAP_SCALE / peak)
            .collect();
        save_gray(&dir.join(format!("{stem}_err{f:03}.png")), ny, nx, &px)?;
    }
    Ok(())
}
