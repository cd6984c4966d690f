//! Synthetic dynamic cardiac-like phantoms and the derived training batches.
//!
//! The phantom replaces a clinical dataset: a static torso ellipse, a
//! contracting myocardium/blood-pool ellipse pair, two bright dots riding on
//! the inner wall, and a smooth random phase so the complex-valued network
//! paths are genuinely exercised. Everything is deterministic given
//! (spec, subject id).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mri::{simulate_coil_maps, CoilMaps, EncodingOperator};
use crate::sampling::{
    effective_mask, generate_mask, sample_contrastive_masks, sample_training_masks, FeatureMode,
    MaskSpec, SamplingMask, FEATURE_R_MAX, FEATURE_R_MIN,
};
use crate::tensor::CTensor;

/// Counts every read of a ground-truth image. Training-path tests assert the
/// delta across a training run is zero; evaluation reads are expected.
static GROUND_TRUTH_READS: AtomicU64 = AtomicU64::new(0);

pub fn ground_truth_reads() -> u64 {
    GROUND_TRUTH_READS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub nx: usize,
    pub ny: usize,
    pub frames: usize,
    pub n_coils: usize,
    pub seed: u64,
    /// Fraction by which the inner radii shrink at peak systole, in [0, 1).
    pub contraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            nx: 32,
            ny: 32,
            frames: 8,
            n_coils: 4,
            seed: 0,
            contraction: 0.3,
        }
    }
}

/// One subject: ground-truth dynamic image, coil maps, and the fully sampled
/// multi-coil k-space. The image is private; every access goes through
/// [`CineSample::ground_truth`], which bumps a global counter so tests can
/// prove the training paths never look at it.
#[derive(Debug, Clone)]
pub struct CineSample {
    image: CTensor,
    pub coils: Arc<CoilMaps>,
    pub kspace_full: CTensor,
    pub subject_id: usize,
}

impl CineSample {
    pub fn new(image: CTensor, coils: Arc<CoilMaps>, subject_id: usize) -> Result<Self> {
        if image.shape().len() != 3 {
            return Err(Error::Invalid("cine image must be [t,x,y]".into()));
        }
        let frames = image.shape()[0];
        let full = Arc::new(SamplingMask::full(image.shape()[2], frames));
        let op = EncodingOperator::new(coils.clone(), full, frames)?;
        let kspace_full = op.forward(&image)?;
        Ok(CineSample {
            image,
            coils,
            kspace_full,
            subject_id,
        })
    }

    pub fn frames(&self) -> usize {
        self.kspace_full.shape()[0]
    }

    pub fn nx(&self) -> usize {
        self.kspace_full.shape()[2]
    }

    pub fn ny(&self) -> usize {
        self.kspace_full.shape()[3]
    }

    pub fn n_coils(&self) -> usize {
        self.coils.n_coils()
    }

    /// The fully sampled reference image. For evaluation and export only.
    pub fn ground_truth(&self) -> &CTensor {
        GROUND_TRUTH_READS.fetch_add(1, Ordering::SeqCst);
        &self.image
    }

    /// Encoding operator for this subject's geometry under the given mask.
    pub fn operator(&self, mask: Arc<SamplingMask>) -> Result<EncodingOperator> {
        EncodingOperator::new(self.coils.clone(), mask, self.frames())
    }
}

fn inside_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    let du = (u - cu) / ru;
    let dv = (v - cv) / rv;
    du * du + dv * dv <= 1.0
}

/// Radius scale over the cycle: 1 at frame 0, (1 - a) at mid-cycle.
fn contraction_scale(frame: usize, frames: usize, amplitude: f64) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * frame as f64 / frames as f64;
    1.0 - amplitude * (1.0 - phase.cos()) / 2.0
}

/// Deterministic synthetic subject. Per-subject randomness (geometry jitter,
/// phase map) comes from a stream derived from (seed, subject_id).
pub fn generate_phantom(spec: &PhantomSpec, subject_id: usize) -> Result<CineSample> {
    if spec.nx < 8 || spec.ny < 8 || !spec.nx.is_multiple_of(2) || !spec.ny.is_multiple_of(2) {
        return Err(Error::Invalid(
            "phantom dims must be even and at least 8".into(),
        ));
    }
    if spec.frames < 2 {
        return Err(Error::Invalid("phantom needs at least 2 frames".into()));
    }
    if !(0.0..1.0).contains(&spec.contraction) {
        return Err(Error::Invalid(
            "contraction amplitude must be in [0,1)".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (subject_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );

    // Geometry in normalized [-1,1] coordinates, jittered per subject.
    let heart_cu = 0.05 * rng.gen_range(-1.0..1.0);
    let heart_cv = 0.05 * rng.gen_range(-1.0..1.0);
    let outer_r = 0.46 + 0.04 * rng.gen_range(-1.0..1.0);
    let inner_r = 0.26 + 0.03 * rng.gen_range(-1.0..1.0);
    let dot_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let dot_r = 0.05;
    if inner_r + 2.0 * dot_r >= outer_r {
        return Err(Error::Infeasible(
            "inner ellipse would touch the outer wall".into(),
        ));
    }

    // Smooth random phase: a few low-order sinusoids with random coefficients.
    let phase_coef: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.6..0.6)).collect();
    let phase = |u: f64, v: f64| -> f64 {
        phase_coef[0]
            + phase_coef[1] * u
            + phase_coef[2] * v
            + phase_coef[3] * (std::f64::consts::PI * u).sin()
            + phase_coef[4] * (std::f64::consts::PI * v).sin()
            + phase_coef[5] * (std::f64::consts::PI * (u + v)).cos()
    };

    let (nx, ny, t) = (spec.nx, spec.ny, spec.frames);
    let mut image = CTensor::zeros(&[t, nx, ny]);
    for f in 0..t {
        let s = contraction_scale(f, t, spec.contraction);
        let r_out = outer_r * s;
        let r_in = inner_r * s;
        // Papillary dots sit between the inner and outer wall, rotating
        // slightly with the cycle so they move frame to frame.
        let dot_dist = (r_in + r_out) / 2.0;
        let wobble =
            0.5 * spec.contraction * (2.0 * std::f64::consts::PI * f as f64 / t as f64).sin();
        for ix in 0..nx {
            let u = 2.0 * (ix as f64 + 0.5) / nx as f64 - 1.0;
            for iy in 0..ny {
                let v = 2.0 * (iy as f64 + 0.5) / ny as f64 - 1.0;
                let mut mag = 0.0;
                if inside_ellipse(u, v, 0.0, 0.0, 0.92, 0.78) {
                    mag = 0.35; // torso background
                }
                if inside_ellipse(u, v, heart_cu, heart_cv, r_out, r_out * 0.9) {
                    mag = 0.8; // myocardium
                }
                if inside_ellipse(u, v, heart_cu, heart_cv, r_in, r_in * 0.9) {
                    mag = 0.5; // blood pool
                }
                for k in 0..2 {
                    let ang = dot_angle + wobble + k as f64 * std::f64::consts::PI * 0.8;
                    let cu = heart_cu + dot_dist * ang.cos();
                    let cv = heart_cv + dot_dist * ang.sin() * 0.9;
                    if inside_ellipse(u, v, cu, cv, dot_r, dot_r) {
                        mag = 1.0;
                    }
                }
                if mag > 0.0 {
                    let ph = phase(u, v);
                    image.set(&[f, ix, iy], Complex64::from_polar(mag, ph));
                }
            }
        }
    }

    let coil_seed = spec
        .seed
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add(subject_id as u64);
    let coils = Arc::new(simulate_coil_maps(spec.n_coils, nx, ny, coil_seed));
    CineSample::new(image, coils, subject_id)
}

/// Inputs for one feature-learning step: two views of the same subject's
/// 2x parallel-imaging image, plus (contrastive mode only) a negative view
/// of a different subject.
#[derive(Debug)]
pub struct FeaturePairBatch {
    pub x1u: CTensor,
    pub x2u: CTensor,
    pub x3u: Option<CTensor>,
    pub y1: CTensor,
    pub y2: CTensor,
    pub y3: Option<CTensor>,
    pub op1: Arc<EncodingOperator>,
    pub op2: Arc<EncodingOperator>,
    pub op3: Option<Arc<EncodingOperator>>,
}

/// The 2x parallel-imaging image of a subject: adjoint of its fully sampled
/// k-space restricted to an R=2 mask.
pub fn two_x_image(sample: &CineSample, seed: u64) -> Result<(CTensor, Arc<SamplingMask>)> {
    let mask = Arc::new(generate_mask(&MaskSpec::new(
        sample.ny(),
        sample.frames(),
        2.0,
        seed,
    ))?);
    let op = sample.operator(mask.clone())?;
    let mut y = sample.kspace_full.clone();
    op.apply_mask(&mut y);
    Ok((op.adjoint(&y)?, mask))
}

pub fn make_feature_batch(
    sample_a: &CineSample,
    sample_b: &CineSample,
    mode: FeatureMode,
    rng: &mut impl Rng,
) -> Result<FeaturePairBatch> {
    if mode == FeatureMode::Contrastive && sample_a.subject_id == sample_b.subject_id {
        return Err(Error::Invalid(
            "contrastive negatives must come from a different subject".into(),
        ));
    }
    let (x1, _) = two_x_image(sample_a, rng.gen())?;
    let (m1, m2, m3) = sample_contrastive_masks(rng, sample_a.ny(), sample_a.frames(), mode)?;
    let op1 = Arc::new(sample_a.operator(Arc::new(m1))?);
    let op2 = Arc::new(sample_a.operator(Arc::new(m2))?);
    let y1 = op1.forward(&x1)?;
    let y2 = op2.forward(&x1)?;
    let x1u = op1.adjoint(&y1)?;
    let x2u = op2.adjoint(&y2)?;
    let (x3u, y3, op3) = match m3 {
        Some(m3) => {
            let (x3, _) = two_x_image(sample_b, rng.gen())?;
            let op3 = Arc::new(sample_b.operator(Arc::new(m3))?);
            let y3 = op3.forward(&x3)?;
            (Some(op3.adjoint(&y3)?), Some(y3), Some(op3))
        }
        None => (None, None, None),
    };
    Ok(FeaturePairBatch {
        x1u,
        x2u,
        x3u,
        y1,
        y2,
        y3,
        op1,
        op2,
        op3,
    })
}

/// Inputs for one reconstruction-training step: the initially undersampled
/// k-space y split into two re-undersampled views with their effective masks.
#[derive(Debug)]
pub struct ReconPairBatch {
    pub y: CTensor,
    pub y1: CTensor,
    pub y2: CTensor,
    pub m_y: Arc<SamplingMask>,
    pub m_y1: Arc<SamplingMask>,
    pub m_y2: Arc<SamplingMask>,
    pub x1: CTensor,
    pub x2: CTensor,
    /// Operators built from the effective masks; used for DC and the loss.
    pub op1: Arc<EncodingOperator>,
    pub op2: Arc<EncodingOperator>,
}

pub fn make_recon_batch(
    sample: &CineSample,
    initial_r: f64,
    rng: &mut impl Rng,
) -> Result<ReconPairBatch> {
    let m_y = Arc::new(generate_mask(&MaskSpec::new(
        sample.ny(),
        sample.frames(),
        initial_r,
        rng.gen(),
    ))?);
    let op_y = sample.operator(m_y.clone())?;
    let mut y = sample.kspace_full.clone();
    op_y.apply_mask(&mut y);

    let (m1, m2) = sample_training_masks(
        rng,
        sample.ny(),
        sample.frames(),
        FEATURE_R_MIN,
        FEATURE_R_MAX,
    )?;
    let m_y1 = Arc::new(effective_mask(&m1, &m_y)?);
    let m_y2 = Arc::new(effective_mask(&m2, &m_y)?);
    let op1 = Arc::new(sample.operator(m_y1.clone())?);
    let op2 = Arc::new(sample.operator(m_y2.clone())?);
    let mut y1 = y.clone();
    op1.apply_mask(&mut y1);
    let mut y2 = y.clone();
    op2.apply_mask(&mut y2);
    let x1 = op1.adjoint(&y1)?;
    let x2 = op2.adjoint(&y2)?;
    Ok(ReconPairBatch {
        y,
        y1,
        y2,
        m_y,
        m_y1,
        m_y2,
        x1,
        x2,
        op1,
        op2,
    })
}
