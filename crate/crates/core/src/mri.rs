//! Multi-coil Cartesian encoding physics.
//!
//! `EncodingOperator` implements A = M F S: coil-sensitivity weighting,
//! orthonormal 2D FFT, then zeroing of unsampled phase-encode lines. Masks
//! are stored in centered line coordinates and converted to DFT ordering
//! when applied, so the forced center block really covers the k-space
//! center.
//!
//! Image layout: [t, x, y]. K-space layout: [t, c, x, y].

use crate::error::{Error, Result};
use crate::fft::{fft2_ortho, ifft2_ortho};
use crate::sampling::SamplingMask;
use crate::tensor::CTensor;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Smooth complex coil sensitivities, normalized so Σ_c |S_c|² = 1 at every
/// pixel (which makes AᴴA = I under full sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct CoilMaps {
    /// [c, x, y]
    pub maps: CTensor,
}

impl CoilMaps {
    pub fn n_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }
}

/// Gaussian-bump magnitude profiles centered at distinct border positions
/// with smooth linear phase, pixelwise normalized to unit root-sum-of-squares.
pub fn simulate_coil_maps(n_coils: usize, nx: usize, ny: usize, seed: u64) -> CoilMaps {
    assert!(n_coils >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = CTensor::zeros(&[n_coils, nx, ny]);
    for c in 0..n_coils {
        // border position, evenly spread with a seeded jitter
        let ang = 2.0 * std::f64::consts::PI * (c as f64 + rng.gen::<f64>() * 0.4) / n_coils as f64;
        let cx = nx as f64 / 2.0 + 0.6 * nx as f64 / 2.0 * ang.cos();
        let cy = ny as f64 / 2.0 + 0.6 * ny as f64 / 2.0 * ang.sin();
        let sigma = 0.6 * nx.max(ny) as f64;
        let (px, py) = (
            rng.gen_range(-0.5..0.5) / nx as f64,
            rng.gen_range(-0.5..0.5) / ny as f64,
        );
        let phi0 = rng.gen_range(0.0..std::f64::consts::TAU);
        for x in 0..nx {
            for y in 0..ny {
                let dx = (x as f64 - cx) / sigma;
                let dy = (y as f64 - cy) / sigma;
                let mag = (-0.5 * (dx * dx + dy * dy)).exp() + 0.05;
                let phase = phi0 + std::f64::consts::TAU * (px * x as f64 + py * y as f64);
                raw.set(&[c, x, y], Complex64::from_polar(mag, phase));
            }
        }
    }
    // pixelwise RSS normalization
    for x in 0..nx {
        for y in 0..ny {
            let rss: f64 = (0..n_coils)
                .map(|c| raw.at(&[c, x, y]).norm_sqr())
                .sum::<f64>()
                .sqrt();
            for c in 0..n_coils {
                let v = raw.at(&[c, x, y]);
                raw.set(&[c, x, y], v / rss);
            }
        }
    }
    CoilMaps { maps: raw }
}

/// A = M F S with shared mask and coil-map instances for forward and adjoint.
#[derive(Debug, Clone)]
pub struct EncodingOperator {
    pub coils: Arc<CoilMaps>,
    pub mask: Arc<SamplingMask>,
    /// mask in DFT line ordering, [t][y_dft]
    mask_dft: Vec<Vec<bool>>,
    pub frames: usize,
    pub nx: usize,
    pub ny: usize,
}

/// Centered line index -> DFT line index (ifftshift along y).
fn dft_line_order(mask: &SamplingMask, ny: usize) -> Vec<Vec<bool>> {
    mask.pattern
        .iter()
        .map(|row| {
            let mut out = vec![false; ny];
            for (j, &on) in row.iter().enumerate() {
                let f = (j as isize - (ny / 2) as isize).rem_euclid(ny as isize) as usize;
                out[f] = on;
            }
            out
        })
        .collect()
}

impl EncodingOperator {
    pub fn new(coils: Arc<CoilMaps>, mask: Arc<SamplingMask>, frames: usize) -> Result<Self> {
        let (nx, ny) = coils.dims();
        if mask.y_lines() != ny || mask.frames() != frames {
            return Err(Error::shape(
                "encoding operator mask (frames x y_lines)",
                &[mask.frames(), mask.y_lines()],
                &[frames, ny],
            ));
        }
        let mask_dft = dft_line_order(&mask, ny);
        Ok(EncodingOperator {
            coils,
            mask: mask.clone(),
            mask_dft,
            frames,
            nx,
            ny,
        })
    }

    pub fn n_coils(&self) -> usize {
        self.coils.n_coils()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.frames, self.nx, self.ny]
    }

    pub fn kspace_shape(&self) -> [usize; 4] {
        [self.frames, self.n_coils(), self.nx, self.ny]
    }

    fn check_image(&self, x: &CTensor, context: &str) -> Result<()> {
        if x.shape() != self.image_shape() {
            return Err(Error::shape(context, x.shape(), &self.image_shape()));
        }
        Ok(())
    }

    fn check_kspace(&self, y: &CTensor, context: &str) -> Result<()> {
        if y.shape() != self.kspace_shape() {
            return Err(Error::shape(context, y.shape(), &self.kspace_shape()));
        }
        Ok(())
    }

    /// The mask as a 0/1 k-space-shaped tensor (DFT line ordering), for use
    /// as a multiplicative constant in graph-built losses.
    pub fn mask_tensor(&self) -> CTensor {
        let [t, c, nx, ny] = self.kspace_shape();
        let mut out = CTensor::zeros(&[t, c, nx, ny]);
        let data = out.data_mut();
        for ti in 0..t {
            for (f, &on) in self.mask_dft[ti].iter().enumerate() {
                if !on {
                    continue;
                }
                for ci in 0..c {
                    for xi in 0..nx {
                        data[((ti * c + ci) * nx + xi) * ny + f] = Complex64::new(1.0, 0.0);
                    }
                }
            }
        }
        out
    }

    /// Zero out unsampled phase-encode lines (in place on a k-space tensor).
    pub fn apply_mask(&self, k: &mut CTensor) {
        let [t, c, nx, ny] = self.kspace_shape();
        let data = k.data_mut();
        for ti in 0..t {
            for ci in 0..c {
                for xi in 0..nx {
                    let base = ((ti * c + ci) * nx + xi) * ny;
                    for yi in 0..ny {
                        if !self.mask_dft[ti][yi] {
                            data[base + yi] = Complex64::new(0.0, 0.0);
                        }
                    }
                }
            }
        }
    }

    /// y = M F S x, per coil and frame.
    pub fn forward(&self, x: &CTensor) -> Result<CTensor> {
        self.check_image(x, "encoding forward input [t,x,y]")?;
        let [t, c, nx, ny] = self.kspace_shape();
        let mut coil_imgs = CTensor::zeros(&[t, c, nx, ny]);
        {
            let s = self.coils.maps.data();
            let xd = x.data();
            let out = coil_imgs.data_mut();
            for ti in 0..t {
                for ci in 0..c {
                    let sb = ci * nx * ny;
                    let xb = ti * nx * ny;
                    let ob = (ti * c + ci) * nx * ny;
                    for p in 0..nx * ny {
                        out[ob + p] = xd[xb + p] * s[sb + p];
                    }
                }
            }
        }
        let mut k = fft2_ortho(&coil_imgs);
        self.apply_mask(&mut k);
        Ok(k)
    }

    /// x = Sᴴ Fᴴ M y: mask, inverse FFT, conjugate coil combine.
    pub fn adjoint(&self, y: &CTensor) -> Result<CTensor> {
        self.check_kspace(y, "encoding adjoint input [t,c,x,y]")?;
        let [t, c, nx, ny] = self.kspace_shape();
        let mut k = y.clone();
        self.apply_mask(&mut k);
        let imgs = ifft2_ortho(&k);
        let mut out = CTensor::zeros(&[t, nx, ny]);
        {
            let s = self.coils.maps.data();
            let id = imgs.data();
            let od = out.data_mut();
            for ti in 0..t {
                for ci in 0..c {
                    let sb = ci * nx * ny;
                    let ib = (ti * c + ci) * nx * ny;
                    let ob = ti * nx * ny;
                    for p in 0..nx * ny {
                        od[ob + p] += id[ib + p] * s[sb + p].conj();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Single non-differentiable DC gradient step x - λ Aᴴ(A x - y).
    /// The differentiable version used inside the networks lives in the graph
    /// module; this one serves plain evaluation paths.
    pub fn dc_step(&self, x: &CTensor, y: &CTensor, lambda: f64) -> Result<CTensor> {
        let residual = self.forward(x)?.sub(y);
        let grad = self.adjoint(&residual)?;
        Ok(x.sub(&grad.scale_re(lambda)))
    }
}
