//! Variable-density incoherent y–t Cartesian sampling masks.
//!
//! A surrogate for VISTA-style sampling: per frame a fixed line budget is
//! drawn without replacement from a centered Gaussian density, with a block
//! of central lines always forced on. Frames use decorrelated draws so the
//! pattern is incoherent along time.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_DENSITY_SIGMA: f64 = 0.3;
pub const DEFAULT_CENTER_LINES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub y_lines: usize,
    pub frames: usize,
    pub nominal_r: f64,
    pub seed: u64,
    /// Gaussian density width as a fraction of `y_lines`.
    pub density_sigma: f64,
    pub center_lines: usize,
}

impl MaskSpec {
    pub fn new(y_lines: usize, frames: usize, nominal_r: f64, seed: u64) -> Self {
        MaskSpec {
            y_lines,
            frames,
            nominal_r,
            seed,
            density_sigma: DEFAULT_DENSITY_SIGMA,
            center_lines: DEFAULT_CENTER_LINES,
        }
    }
}

/// Binary phase-encode × frame pattern; `pattern[t][y] = true` means line
/// `y` (centered indexing: the k-space center sits at `y_lines / 2`) is
/// acquired in frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub pattern: Vec<Vec<bool>>,
    pub nominal_r: f64,
    pub seed: u64,
    pub center_lines: usize,
}

impl SamplingMask {
    pub fn frames(&self) -> usize {
        self.pattern.len()
    }

    pub fn y_lines(&self) -> usize {
        self.pattern[0].len()
    }

    pub fn ones(&self) -> usize {
        self.pattern
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count())
            .sum()
    }

    /// t·y / (number of sampled lines).
    pub fn actual_r(&self) -> f64 {
        (self.frames() * self.y_lines()) as f64 / self.ones() as f64
    }

    pub fn full(y_lines: usize, frames: usize) -> Self {
        SamplingMask {
            pattern: vec![vec![true; y_lines]; frames],
            nominal_r: 1.0,
            seed: 0,
            center_lines: y_lines,
        }
    }

    /// Central always-sampled block, centered indexing.
    pub fn center_range(y_lines: usize, center_lines: usize) -> std::ops::Range<usize> {
        let lo = y_lines / 2 - center_lines / 2;
        lo..lo + center_lines
    }
}

fn per_frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    // splitmix-style stream separation so frames decorrelate
    let mut z = seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(frame as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Generate a variable-density incoherent mask. Pure function of its spec.
pub fn generate_mask(spec: &MaskSpec) -> Result<SamplingMask> {
    if spec.nominal_r < 1.0 {
        return Err(Error::Invalid("nominal R must be >= 1".into()));
    }
    if spec.center_lines < 1 || spec.center_lines > spec.y_lines {
        return Err(Error::Invalid("center_lines out of range".into()));
    }
    if spec.nominal_r > spec.y_lines as f64 / spec.center_lines as f64 {
        return Err(Error::Infeasible(format!(
            "nominal R {} needs fewer than the {} forced center lines on {} lines; \
             R must be <= {}",
            spec.nominal_r,
            spec.center_lines,
            spec.y_lines,
            spec.y_lines as f64 / spec.center_lines as f64
        )));
    }

    let budget = ((spec.y_lines as f64 / spec.nominal_r).round() as usize)
        .max(spec.center_lines)
        .min(spec.y_lines);
    let center = SamplingMask::center_range(spec.y_lines, spec.center_lines);
    let sigma = spec.density_sigma * spec.y_lines as f64;
    let mid = (spec.y_lines as f64 - 1.0) / 2.0;

    let mut pattern = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut row = vec![false; spec.y_lines];
        for y in center.clone() {
            row[y] = true;
        }
        let mut remaining = budget - spec.center_lines;
        let mut rng = per_frame_rng(spec.seed, t);
        // Gaussian-weighted draw without replacement over the free lines.
        let mut candidates: Vec<usize> = (0..spec.y_lines).filter(|y| !row[*y]).collect();
        while remaining > 0 && !candidates.is_empty() {
            let weights: Vec<f64> = candidates
                .iter()
                .map(|&y| {
                    let d = (y as f64 - mid) / sigma;
                    (-0.5 * d * d).exp()
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = candidates.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= *w;
            }
            row[candidates[pick]] = true;
            candidates.swap_remove(pick);
            remaining -= 1;
        }
        pattern.push(row);
    }

    Ok(SamplingMask {
        pattern,
        nominal_r: spec.nominal_r,
        seed: spec.seed,
        center_lines: spec.center_lines,
    })
}

/// Elementwise mask product; the effective mask of a re-undersampled k-space.
pub fn effective_mask(m_re: &SamplingMask, m_init: &SamplingMask) -> Result<SamplingMask> {
    if m_re.frames() != m_init.frames() || m_re.y_lines() != m_init.y_lines() {
        return Err(Error::shape(
            "effective_mask (frames x y_lines)",
            &[m_re.frames(), m_re.y_lines()],
            &[m_init.frames(), m_init.y_lines()],
        ));
    }
    let pattern: Vec<Vec<bool>> = m_re
        .pattern
        .iter()
        .zip(&m_init.pattern)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x && *y).collect())
        .collect();
    let mut out = SamplingMask {
        pattern,
        nominal_r: 1.0,
        seed: m_re.seed,
        center_lines: m_re.center_lines.min(m_init.center_lines),
    };
    out.nominal_r = out.actual_r();
    Ok(out)
}

/// Two independent re-undersampling masks with uniform random nominal R.
pub fn sample_training_masks(
    rng: &mut impl Rng,
    y_lines: usize,
    frames: usize,
    r_min: f64,
    r_max: f64,
) -> Result<(SamplingMask, SamplingMask)> {
    let r1 = rng.gen_range(r_min..=r_max);
    let r2 = rng.gen_range(r_min..=r_max);
    let s1 = rng.gen::<u64>();
    let s2 = rng.gen::<u64>();
    let m1 = generate_mask(&MaskSpec::new(y_lines, frames, r1, s1))?;
    let m2 = generate_mask(&MaskSpec::new(y_lines, frames, r2, s2))?;
    Ok((m1, m2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    Contrastive,
    Vicreg,
}

pub const FEATURE_R_MIN: f64 = 2.0;
pub const FEATURE_R_MAX: f64 = 16.0;
/// Required acceleration gap between the negative mask and the positive pair.
pub const NEGATIVE_R_GAP: f64 = 5.0;

/// Positive-pair masks (plus the negative-subject mask in contrastive mode).
///
/// Contrastive: M1 and M2 share one random R but differ in seeds; M3's R is
/// strictly more than [`NEGATIVE_R_GAP`] away from it. Vicreg: M1 and M2 draw
/// independent accelerations and no M3 is produced.
pub fn sample_contrastive_masks(
    rng: &mut impl Rng,
    y_lines: usize,
    frames: usize,
    mode: FeatureMode,
) -> Result<(SamplingMask, SamplingMask, Option<SamplingMask>)> {
    match mode {
        FeatureMode::Vicreg => {
            let (m1, m2) =
                sample_training_masks(rng, y_lines, frames, FEATURE_R_MIN, FEATURE_R_MAX)?;
            Ok((m1, m2, None))
        }
        FeatureMode::Contrastive => {
            let r = rng.gen_range(FEATURE_R_MIN..=FEATURE_R_MAX);
            let m1 = generate_mask(&MaskSpec::new(y_lines, frames, r, rng.gen()))?;
            let m2 = generate_mask(&MaskSpec::new(y_lines, frames, r, rng.gen()))?;
            let r3 = loop {
                let cand = rng.gen_range(FEATURE_R_MIN..=FEATURE_R_MAX);
                if (cand - r).abs() > NEGATIVE_R_GAP {
                    break cand;
                }
            };
            let m3 = generate_mask(&MaskSpec::new(y_lines, frames, r3, rng.gen()))?;
            Ok((m1, m2, Some(m3)))
        }
    }
}
