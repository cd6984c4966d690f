//! Training objectives, all composed from graph primitives so the backward
//! pass is covered by the primitive-level gradient checks.
//!
//! Embedding losses treat frames as independent samples of shape [t, c].
//! Reconstruction losses couple the image domain (mean squared difference)
//! with a cross k-space term in which each reconstruction is measured
//! against the *other* view's sampled k-space.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mri::EncodingOperator;

/// Floor on cosine-similarity denominators; zero-norm embeddings would
/// otherwise divide by zero.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregWeights {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    /// Target per-dimension standard deviation.
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        VicregWeights {
            lambda: 25.0,
            mu: 25.0,
            nu: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.5 }
    }
}

/// Per-frame cosine similarity of two [t, c] embeddings -> [t].
fn cosine_sim(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let prod = g.mul(a, b)?;
    let dot = g.sum_axis_last(prod)?;
    let a2 = g.abs2(a);
    let na2 = g.sum_axis_last(a2)?;
    let na = g.sqrt(na2);
    let b2 = g.abs2(b);
    let nb2 = g.sum_axis_last(b2)?;
    let nb = g.sqrt(nb2);
    let denom = g.mul(na, nb)?;
    let denom = g.clamp_min_re(denom, COSINE_NORM_FLOOR);
    g.div(dot, denom)
}

/// Softmax-style contrastive loss over the three pairwise similarities,
/// averaged over frames: the (e1, e2) pair is pulled together while both
/// pairs involving e3 act as negatives.
pub fn infonce(
    g: &mut Graph,
    e1: NodeId,
    e2: NodeId,
    e3: NodeId,
    cfg: &ContrastiveConfig,
) -> Result<NodeId> {
    if cfg.tau <= 0.0 {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    let s12 = cosine_sim(g, e1, e2)?;
    let s13 = cosine_sim(g, e1, e3)?;
    let s23 = cosine_sim(g, e2, e3)?;
    let inv_tau = 1.0 / cfg.tau;
    let p12 = g.scale_re(s12, inv_tau);
    let p13 = g.scale_re(s13, inv_tau);
    let p23 = g.scale_re(s23, inv_tau);
    let x12 = g.exp(p12);
    let x13 = g.exp(p13);
    let x23 = g.exp(p23);
    let sum = g.add(x12, x13)?;
    let sum = g.add(sum, x23)?;
    let log_denom = g.ln(sum);
    // -log(x12 / sum) = log(sum) - s12/tau, per frame
    let per_frame = g.sub(log_denom, p12)?;
    Ok(g.mean_all(per_frame))
}

/// (1/t) Σ_j ‖e1_j − e2_j‖²
pub fn vicreg_invariance(g: &mut Graph, e1: NodeId, e2: NodeId) -> Result<NodeId> {
    let t = g.value(e1).shape()[0];
    let d = g.sub(e1, e2)?;
    let sq = g.abs2(d);
    let s = g.sum_all(sq);
    Ok(g.scale_re(s, 1.0 / t as f64))
}

/// Per-column centered embedding and the 1/(t-1) normalizer.
fn centered(g: &mut Graph, e: NodeId) -> Result<(NodeId, usize, usize)> {
    let sh = g.value(e).shape().to_vec();
    if sh.len() != 2 {
        return Err(Error::Invalid("embeddings must be [t, c]".into()));
    }
    let (t, c) = (sh[0], sh[1]);
    if t < 2 {
        return Err(Error::Invalid(
            "variance terms need at least 2 frames".into(),
        ));
    }
    let col_sum = g.sum_axis0(e)?;
    let mean = g.scale_re(col_sum, 1.0 / t as f64);
    let mean_rows = g.broadcast_axis0(mean, t)?;
    let d = g.sub(e, mean_rows)?;
    Ok((d, t, c))
}

/// (1/c) Σ_k max(0, γ − sqrt(Var_k + ε)), unbiased column variance.
pub fn vicreg_variance(g: &mut Graph, e: NodeId, gamma: f64, epsilon: f64) -> Result<NodeId> {
    let (d, t, c) = centered(g, e)?;
    let sq = g.abs2(d);
    let var_sum = g.sum_axis0(sq)?;
    let var = g.scale_re(var_sum, 1.0 / (t - 1) as f64);
    let var_eps = g.add_scalar_re(var, epsilon);
    let std = g.sqrt(var_eps);
    let neg = g.neg(std);
    let margin = g.add_scalar_re(neg, gamma);
    let hinge = g.relu_re(margin);
    let s = g.sum_all(hinge);
    Ok(g.scale_re(s, 1.0 / c as f64))
}

/// (1/c) Σ_{m≠n} C_{m,n}² with C the unbiased column covariance matrix.
pub fn vicreg_covariance(g: &mut Graph, e: NodeId) -> Result<NodeId> {
    let (d, t, c) = centered(g, e)?;
    let dt = g.transpose2(d)?;
    let cov = g.matmul(dt, d)?;
    let cov = g.scale_re(cov, 1.0 / (t - 1) as f64);
    // zero the diagonal so only cross-correlations are penalized
    let mut off = crate::tensor::CTensor::zeros(&[c, c]);
    for m in 0..c {
        for n in 0..c {
            if m != n {
                off.set(&[m, n], num_complex::Complex64::new(1.0, 0.0));
            }
        }
    }
    let masked = g.mul_const(cov, Arc::new(off))?;
    let sq = g.abs2(masked);
    let s = g.sum_all(sq);
    Ok(g.scale_re(s, 1.0 / c as f64))
}

/// λ·s(e1,e2) + μ·[v(e1)+v(e2)] + ν·[c(e1)+c(e2)]
pub fn vicreg(g: &mut Graph, e1: NodeId, e2: NodeId, w: &VicregWeights) -> Result<NodeId> {
    let s = vicreg_invariance(g, e1, e2)?;
    let v1 = vicreg_variance(g, e1, w.gamma, w.epsilon)?;
    let v2 = vicreg_variance(g, e2, w.gamma, w.epsilon)?;
    let c1 = vicreg_covariance(g, e1)?;
    let c2 = vicreg_covariance(g, e2)?;
    let ws = g.scale_re(s, w.lambda);
    let v = g.add(v1, v2)?;
    let wv = g.scale_re(v, w.mu);
    let c = g.add(c1, c2)?;
    let wc = g.scale_re(c, w.nu);
    let sv = g.add(ws, wv)?;
    g.add(sv, wc)
}

/// Sum of the per-iteration losses.
pub fn feature_total_loss(g: &mut Graph, per_iteration: &[NodeId]) -> Result<NodeId> {
    let mut it = per_iteration.iter();
    let first = *it
        .next()
        .ok_or_else(|| Error::Invalid("need at least one iteration loss".into()))?;
    let mut acc = first;
    for &l in it {
        acc = g.add(acc, l)?;
    }
    Ok(acc)
}

/// Mean |x1' − x2'|² over all elements.
pub fn image_consistency(g: &mut Graph, x1p: NodeId, x2p: NodeId) -> Result<NodeId> {
    let d = g.sub(x1p, x2p)?;
    let sq = g.abs2(d);
    Ok(g.mean_all(sq))
}

/// How the cross k-space residual is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KspaceLossForm {
    /// Elementwise sqrt(|r|² + ζ) averaged over each mask's sampled support.
    Charbonnier,
    /// sqrt(Σ|r|² + ζ) over the sampled support, one term per direction.
    GlobalNorm,
}

/// One direction of the cross k-space loss: reconstruction x' re-encoded
/// with the *other* view's operator and compared against that view's data.
fn cross_kspace_term(
    g: &mut Graph,
    xp: NodeId,
    y_other: NodeId,
    op_other: &Arc<EncodingOperator>,
    zeta: f64,
    form: KspaceLossForm,
) -> Result<NodeId> {
    let ypp = g.encode_forward(op_other, xp)?;
    let r = g.sub(ypp, y_other)?;
    let mask = Arc::new(op_other.mask_tensor());
    let sampled = op_other.mask.ones() * op_other.nx * op_other.n_coils();
    if sampled == 0 {
        return Err(Error::Invalid("empty sampling support".into()));
    }
    match form {
        KspaceLossForm::Charbonnier => {
            let sq = g.abs2(r);
            let sq_z = g.add_scalar_re(sq, zeta);
            let ch = g.sqrt(sq_z);
            // masking after the sqrt: unsampled entries contribute neither
            // value nor gradient
            let masked = g.mul_const(ch, mask)?;
            let s = g.sum_all(masked);
            Ok(g.scale_re(s, 1.0 / sampled as f64))
        }
        KspaceLossForm::GlobalNorm => {
            let rm = g.mul_const(r, mask)?;
            let sq = g.abs2(rm);
            let s = g.sum_all(sq);
            let s_z = g.add_scalar_re(s, zeta);
            Ok(g.sqrt(s_z))
        }
    }
}

/// Cross k-space loss over both directions (x1' vs y2's support and x2' vs
/// y1's support). `op1`/`op2` carry the effective masks of y1/y2.
#[allow(clippy::too_many_arguments)]
pub fn cross_kspace(
    g: &mut Graph,
    x1p: NodeId,
    x2p: NodeId,
    y1: NodeId,
    y2: NodeId,
    op1: &Arc<EncodingOperator>,
    op2: &Arc<EncodingOperator>,
    zeta: f64,
    form: KspaceLossForm,
) -> Result<NodeId> {
    if zeta <= 0.0 {
        return Err(Error::Invalid("zeta must be positive".into()));
    }
    let t1 = cross_kspace_term(g, x1p, y2, op2, zeta, form)?;
    let t2 = cross_kspace_term(g, x2p, y1, op1, zeta, form)?;
    g.add(t1, t2)
}

/// Image consistency + cross k-space.
#[allow(clippy::too_many_arguments)]
pub fn recon_total(
    g: &mut Graph,
    x1p: NodeId,
    x2p: NodeId,
    y1: NodeId,
    y2: NodeId,
    op1: &Arc<EncodingOperator>,
    op2: &Arc<EncodingOperator>,
    zeta: f64,
    form: KspaceLossForm,
) -> Result<NodeId> {
    let img = image_consistency(g, x1p, x2p)?;
    let ksp = cross_kspace(g, x1p, x2p, y1, y2, op1, op2, zeta, form)?;
    g.add(img, ksp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::simulate_coil_maps;
    use crate::sampling::{generate_mask, MaskSpec, SamplingMask};
    use crate::tensor::CTensor;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn re(v: &[f64], shape: &[usize]) -> CTensor {
        CTensor::from_data(shape, v.iter().map(|&x| Complex64::new(x, 0.0)).collect()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Graph) -> NodeId) -> f64 {
        let mut g = Graph::new();
        let id = f(&mut g);
        let v = g.value(id);
        assert!(v.is_scalar());
        let z = v.scalar_value();
        assert!(z.im.abs() < 1e-12, "loss must be real, got {z}");
        z.re
    }

    #[test]
    fn infonce_hand_values() {
        // e1 = e2, e3 orthogonal to both, tau = 1 -> -log(e/(e+2))
        let cfg = ContrastiveConfig { tau: 1.0 };
        let v = eval(|g| {
            let e1 = g.constant(re(&[1.0, 0.0], &[1, 2]));
            let e2 = g.constant(re(&[1.0, 0.0], &[1, 2]));
            let e3 = g.constant(re(&[0.0, 1.0], &[1, 2]));
            infonce(g, e1, e2, e3, &cfg).unwrap()
        });
        let expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        assert!((v - 0.5514).abs() < 1e-4);

        // all equal -> log 3 regardless of tau
        for tau in [0.5, 1.0, 2.0] {
            let cfg = ContrastiveConfig { tau };
            let v = eval(|g| {
                let e = re(&[0.3, -1.2, 0.5, 2.0], &[2, 2]);
                let e1 = g.constant(e.clone());
                let e2 = g.constant(e.clone());
                let e3 = g.constant(e);
                infonce(g, e1, e2, e3, &cfg).unwrap()
            });
            assert!((v - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_scale_invariant() {
        let cfg = ContrastiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = eval(|g| {
            let e1 = g.constant(re(&a, &[2, 3]));
            let e2 = g.constant(re(&b, &[2, 3]));
            let e3 = g.constant(re(&c, &[2, 3]));
            infonce(g, e1, e2, e3, &cfg).unwrap()
        });
        let scaled = eval(|g| {
            let s = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| 5.0 * x).collect() };
            let e1 = g.constant(re(&s(&a), &[2, 3]));
            let e2 = g.constant(re(&s(&b), &[2, 3]));
            let e3 = g.constant(re(&s(&c), &[2, 3]));
            infonce(g, e1, e2, e3, &cfg).unwrap()
        });
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn invariance_hand_values() {
        let v = eval(|g| {
            let e1 = g.constant(re(&[1.0, 0.0], &[1, 2]));
            let e2 = g.constant(re(&[0.0, 1.0], &[1, 2]));
            vicreg_invariance(g, e1, e2).unwrap()
        });
        assert!((v - 2.0).abs() < 1e-12);

        let zero = eval(|g| {
            let e = re(&[0.4, -0.7, 1.0, 0.1], &[2, 2]);
            let e1 = g.constant(e.clone());
            let e2 = g.constant(e);
            vicreg_invariance(g, e1, e2).unwrap()
        });
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn variance_hand_values() {
        // identical rows: per-dim hinge = 1 - sqrt(1e-4) = 0.99
        let v = eval(|g| {
            let e = g.constant(re(&[0.5, -1.0, 0.5, -1.0], &[2, 2]));
            vicreg_variance(g, e, 1.0, 1e-4).unwrap()
        });
        assert!((v - 0.99).abs() < 1e-12, "{v}");

        // values {0, 2}: Var = 2 (unbiased), sqrt(2+eps) > 1 -> hinge 0
        let v = eval(|g| {
            let e = g.constant(re(&[0.0, 2.0], &[2, 1]));
            vicreg_variance(g, e, 1.0, 1e-4).unwrap()
        });
        assert_eq!(v, 0.0);

        // gamma = 0 -> hinge never positive
        let v = eval(|g| {
            let e = g.constant(re(&[0.3, 0.1, -0.4, 0.9], &[2, 2]));
            vicreg_variance(g, e, 0.0, 1e-4).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn variance_rejects_single_frame() {
        let mut g = Graph::new();
        let e = g.constant(re(&[1.0, 2.0], &[1, 2]));
        assert!(vicreg_variance(&mut g, e, 1.0, 1e-4).is_err());
    }

    #[test]
    fn covariance_hand_values() {
        // rows (1,0), (-1,0): C = [[2,0],[0,0]] -> off-diagonal 0
        let v = eval(|g| {
            let e = g.constant(re(&[1.0, 0.0, -1.0, 0.0], &[2, 2]));
            vicreg_covariance(g, e).unwrap()
        });
        assert_eq!(v, 0.0);

        // rows (1,1), (-1,-1): C = [[2,2],[2,2]] -> (1/2)(4+4) = 4
        let v = eval(|g| {
            let e = g.constant(re(&[1.0, 1.0, -1.0, -1.0], &[2, 2]));
            vicreg_covariance(g, e).unwrap()
        });
        assert!((v - 4.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn covariance_decorrelated_columns_vanish() {
        // independently drawn columns over many samples -> loss near 0
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 4000;
        let c = 3;
        let vals: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let v = eval(|g| {
            let e = g.constant(re(&vals, &[t, c]));
            vicreg_covariance(g, e).unwrap()
        });
        assert!(v < 1e-3, "decorrelated columns should give ~0, got {v}");
    }

    #[test]
    fn vicreg_composition() {
        let w = VicregWeights::default();
        // collapsed identical embeddings: 25·0 + 25·(0.99+0.99) + 1·0 = 49.5
        let v = eval(|g| {
            let e = re(&[0.5, -1.0, 0.5, -1.0], &[2, 2]);
            let e1 = g.constant(e.clone());
            let e2 = g.constant(e);
            vicreg(g, e1, e2, &w).unwrap()
        });
        assert!((v - 49.5).abs() < 1e-10, "{v}");

        let zero_w = VicregWeights {
            lambda: 0.0,
            mu: 0.0,
            nu: 0.0,
            ..w
        };
        let v = eval(|g| {
            let e1 = g.constant(re(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
            let e2 = g.constant(re(&[0.0, 1.0, -1.0, 2.0], &[2, 2]));
            vicreg(g, e1, e2, &zero_w).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn vicreg_near_zero_at_its_optimum() {
        // equal embeddings with per-dim std == gamma and decorrelated dims
        let t = 6;
        // orthogonal-ish columns scaled to unit std
        let col1 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let col2 = [1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        let mut vals = Vec::new();
        for j in 0..t {
            vals.push(col1[j] * (5.0f64 / 6.0).sqrt() * (6.0f64 / 5.0).sqrt());
            vals.push(col2[j] * (5.0f64 / 6.0).sqrt() * (6.0f64 / 5.0).sqrt());
        }
        let v = eval(|g| {
            let e = re(&vals, &[t, 2]);
            let e1 = g.constant(e.clone());
            let e2 = g.constant(e);
            vicreg(g, e1, e2, &VicregWeights::default()).unwrap()
        });
        // invariance exactly 0; variance hinge ~0 (std ≈ 1); covariance small
        assert!(v < 0.5, "near-optimal embeddings should score low, got {v}");
    }

    #[test]
    fn total_loss_sums() {
        let v = eval(|g| {
            let l1 = g.constant(CTensor::scalar_re(1.0));
            let l2 = g.constant(CTensor::scalar_re(2.0));
            let l3 = g.constant(CTensor::scalar_re(3.0));
            feature_total_loss(g, &[l1, l2, l3]).unwrap()
        });
        assert_eq!(v, 6.0);
    }

    #[test]
    fn image_consistency_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = CTensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let zero = eval(|g| {
            let a = g.constant(x.clone());
            let b = g.constant(x.clone());
            image_consistency(g, a, b).unwrap()
        });
        assert_eq!(zero, 0.0);

        let one = eval(|g| {
            let a = g.constant(x.clone());
            let b = g.constant(x.map(|z| z + Complex64::new(1.0, 0.0)));
            image_consistency(g, a, b).unwrap()
        });
        assert!((one - 1.0).abs() < 1e-12);

        let four = eval(|g| {
            let a = g.constant(x.clone());
            let b = g.constant(x.map(|z| z + Complex64::new(0.0, 2.0)));
            image_consistency(g, a, b).unwrap()
        });
        assert!((four - 4.0).abs() < 1e-12);
    }

    fn kspace_setup() -> (
        Arc<EncodingOperator>,
        Arc<EncodingOperator>,
        CTensor,
        CTensor,
        CTensor,
    ) {
        let (t, n) = (2usize, 8usize);
        let coils = Arc::new(simulate_coil_maps(2, n, n, 1));
        let m1 = Arc::new(generate_mask(&MaskSpec::new(n, t, 2.0, 5)).unwrap());
        let m2 = Arc::new(generate_mask(&MaskSpec::new(n, t, 2.0, 9)).unwrap());
        let op1 = Arc::new(EncodingOperator::new(coils.clone(), m1, t).unwrap());
        let op2 = Arc::new(EncodingOperator::new(coils.clone(), m2, t).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = CTensor::randn(&[t, n, n], 1.0, &mut rng);
        let full =
            Arc::new(EncodingOperator::new(coils, Arc::new(SamplingMask::full(n, t)), t).unwrap());
        let k = full.forward(&x).unwrap();
        let mut y1 = k.clone();
        op1.apply_mask(&mut y1);
        let mut y2 = k;
        op2.apply_mask(&mut y2);
        (op1, op2, x, y1, y2)
    }

    #[test]
    fn cross_kspace_zero_residual_floor() {
        let (op1, op2, x, y1, y2) = kspace_setup();
        let zeta = 1e-9;
        // x is consistent with the fully sampled k-space, so both residuals
        // vanish and the loss is exactly 2·sqrt(zeta).
        let v = eval(|g| {
            let x1 = g.constant(x.clone());
            let x2 = g.constant(x.clone());
            let y1 = g.constant(y1.clone());
            let y2 = g.constant(y2.clone());
            cross_kspace(
                g,
                x1,
                x2,
                y1,
                y2,
                &op1,
                &op2,
                zeta,
                KspaceLossForm::Charbonnier,
            )
            .unwrap()
        });
        assert!((v - 2.0 * zeta.sqrt()).abs() < 1e-15, "{v}");

        let v2 = eval(|g| {
            let x1 = g.constant(x.clone());
            let x2 = g.constant(x.clone());
            let y1 = g.constant(y1.clone());
            let y2 = g.constant(y2.clone());
            cross_kspace(
                g,
                x1,
                x2,
                y1,
                y2,
                &op1,
                &op2,
                2.0 * zeta,
                KspaceLossForm::Charbonnier,
            )
            .unwrap()
        });
        assert!(
            (v2 / v - 2f64.sqrt()).abs() < 1e-9,
            "doubling zeta scales by sqrt(2)"
        );
    }

    #[test]
    fn cross_kspace_unit_residual() {
        // residual of magnitude 1 at every sampled point, zeta ~ 0 -> ~2
        let (t, n) = (2usize, 4usize);
        let maps = CTensor::from_fn(&[1, n, n], |_| Complex64::new(1.0, 0.0));
        let coils = Arc::new(crate::mri::CoilMaps { maps });
        let full = Arc::new(SamplingMask::full(n, t));
        let op = Arc::new(EncodingOperator::new(coils, full, t).unwrap());
        let y_zero = CTensor::zeros(&[t, 1, n, n]);
        // choose x with F S x of unit magnitude everywhere: an impulse per
        // frame scaled by sqrt(N)
        let mut x = CTensor::zeros(&[t, n, n]);
        for f in 0..t {
            x.set(&[f, 0, 0], Complex64::new(n as f64, 0.0)); // sqrt(n*n)
        }
        let v = eval(|g| {
            let x1 = g.constant(x.clone());
            let x2 = g.constant(x.clone());
            let y1 = g.constant(y_zero.clone());
            let y2 = g.constant(y_zero.clone());
            cross_kspace(
                g,
                x1,
                x2,
                y1,
                y2,
                &op,
                &op,
                1e-18,
                KspaceLossForm::Charbonnier,
            )
            .unwrap()
        });
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn cross_kspace_gradient_avoids_unsampled_points() {
        let (op1, op2, x, y1, y2) = kspace_setup();
        let mut g = Graph::new();
        let x1 = g.param("x1", x.clone());
        let x2 = g.constant(x.clone());
        let y1n = g.constant(y1);
        let y2n = g.constant(y2);
        let loss = cross_kspace(
            &mut g,
            x1,
            x2,
            y1n,
            y2n,
            &op1,
            &op2,
            1e-9,
            KspaceLossForm::Charbonnier,
        )
        .unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get("x1", x.shape());
        // Perturbing x1 in k-space positions opposite to op2's support must
        // not change the loss: verify via the adjoint-domain gradient. Build
        // the k-space gradient image and check it lives on op2's support.
        let full = Arc::new(
            EncodingOperator::new(
                op1.coils.clone(),
                Arc::new(SamplingMask::full(op1.ny, op1.frames)),
                op1.frames,
            )
            .unwrap(),
        );
        let gk = full.forward(&gx).unwrap();
        let support = op2.mask_tensor();
        for (i, &m) in support.data().iter().enumerate() {
            if m.re == 0.0 {
                assert!(
                    gk.data()[i].norm() < 1e-10,
                    "gradient leaked outside the sampled support at {i}"
                );
            }
        }
    }

    #[test]
    fn recon_total_symmetry() {
        let (op1, op2, x, y1, y2) = kspace_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x1v = x.add(&CTensor::randn(x.shape(), 0.1, &mut rng));
        let x2v = x.add(&CTensor::randn(x.shape(), 0.1, &mut rng));
        let a = eval(|g| {
            let x1 = g.constant(x1v.clone());
            let x2 = g.constant(x2v.clone());
            let y1 = g.constant(y1.clone());
            let y2 = g.constant(y2.clone());
            recon_total(
                g,
                x1,
                x2,
                y1,
                y2,
                &op1,
                &op2,
                1e-9,
                KspaceLossForm::Charbonnier,
            )
            .unwrap()
        });
        let b = eval(|g| {
            let x1 = g.constant(x2v.clone());
            let x2 = g.constant(x1v.clone());
            let ya = g.constant(y2.clone());
            let yb = g.constant(y1.clone());
            recon_total(
                g,
                x1,
                x2,
                ya,
                yb,
                &op2,
                &op1,
                1e-9,
                KspaceLossForm::Charbonnier,
            )
            .unwrap()
        });
        assert!(
            (a - b).abs() < 1e-12,
            "swapping the two views is a symmetry"
        );
    }

    #[test]
    fn infonce_descent_aligns_positives() {
        // Gradient descent over e2 rotates it towards e1. The optimum is not
        // exact alignment: the denominator also contains the (e2, e3) pair,
        // so the minimizer trades a little alignment with e1 for distance
        // from e3 (analytically, d/dα at α=0 is negative for any τ).
        let cfg = ContrastiveConfig { tau: 0.5 };
        let e1v = re(&[1.0, 0.0, 0.0], &[1, 3]);
        let e3v = re(&[0.0, 0.0, 1.0], &[1, 3]);
        let mut e2v = re(&[0.2, 0.9, 0.3], &[1, 3]);
        let mut last = f64::INFINITY;
        for _ in 0..3000 {
            let mut g = Graph::new();
            let e1 = g.constant(e1v.clone());
            let e2 = g.param("e2", e2v.clone());
            let e3 = g.constant(e3v.clone());
            let loss = infonce(&mut g, e1, e2, e3, &cfg).unwrap();
            let l = g.value(loss).scalar_value().re;
            assert!(l <= last + 1e-9);
            last = l;
            let grads = g.backward(loss).unwrap();
            let ge = grads.get("e2", e2v.shape());
            e2v = e2v.add(&ge.scale_re(-0.1));
        }
        let cos = {
            let dot: Complex64 = e1v.inner(&e2v);
            dot.re / (e1v.norm() * e2v.norm())
        };
        assert!(cos > 0.9, "e2 should align closely with e1, cos = {cos}");
        // and much closer to e1 than to the negative
        let cos_neg = {
            let dot: Complex64 = e3v.inner(&e2v);
            dot.re / (e3v.norm() * e2v.norm())
        };
        assert!(cos_neg < 0.0, "e2 should repel e3, cos = {cos_neg}");
    }

    #[test]
    fn vicreg_gradcheck() {
        use crate::gradcheck::assert_gradients;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = crate::gradcheck::ParamSet::new();
        let mk = |rng: &mut ChaCha8Rng| {
            let mut t = CTensor::randn(&[6, 4], 1.0, rng);
            for z in t.data_mut() {
                *z = Complex64::new(z.re, 0.0);
            }
            t
        };
        params.insert("e1".into(), mk(&mut rng));
        params.insert("e2".into(), mk(&mut rng));
        let w = VicregWeights::default();
        assert_gradients(
            &move |g: &mut Graph, ids: &std::collections::BTreeMap<String, NodeId>| {
                vicreg(g, ids["e1"], ids["e2"], &w).unwrap()
            },
            &params,
            1e-5,
            1e-4,
            4,
            22,
        );
    }
}
