//! Network definitions: the complex-valued two-stage UNet, the MLP
//! projection head, and the unrolled feature-extraction / reconstruction
//! networks built on the autodiff graph.
//!
//! Parameters live in a flat name -> tensor map. Real-valued parameters
//! (ModReLU biases, MLP weights, DC step sizes) are identified by name so
//! the optimizer can project their gradients onto the real axis.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::ParamSet;
use crate::graph::{Graph, NodeId};
use crate::mri::EncodingOperator;
use crate::tensor::CTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Channels after the first encoder stage; the plan is
    /// f_base -> 2·f_base -> bottleneck n_fe -> mirrored decoder.
    pub f_base: usize,
    /// Bottleneck feature channels (the injectable representation).
    pub n_fe: usize,
    /// Embedding dimension produced by the MLP head.
    pub n_fm: usize,
    pub mlp_hidden: usize,
    /// Unrolled iterations (UNet + optional MLP + DC per iteration).
    pub iterations: usize,
    pub k_spatial: usize,
    pub k_temporal: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f_base: 8,
            n_fe: 32,
            n_fm: 32,
            mlp_hidden: 64,
            iterations: 3,
            k_spatial: 5,
            k_temporal: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_base == 0
            || self.n_fe == 0
            || self.n_fm == 0
            || self.mlp_hidden == 0
            || self.iterations == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.k_spatial.is_multiple_of(2) || self.k_temporal.is_multiple_of(2) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    /// The feature grid is the input grid after two 2x poolings.
    pub fn feature_shape(&self, frames: usize, nx: usize, ny: usize) -> [usize; 4] {
        [frames, nx / 4, ny / 4, self.n_fe]
    }
}

/// Feature extractor and reconstructor must agree on everything the injected
/// feature depends on.
pub fn check_congruence(fe: &ModelConfig, recon: &ModelConfig) -> Result<()> {
    if fe.iterations != recon.iterations
        || fe.f_base != recon.f_base
        || fe.n_fe != recon.n_fe
        || fe.k_spatial != recon.k_spatial
        || fe.k_temporal != recon.k_temporal
    {
        return Err(Error::Config(
            "feature and reconstruction networks must share the channel plan and iteration count"
                .into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    /// Unrolled extractor: UNet + MLP head + DC per iteration.
    Feature,
    /// Unrolled reconstructor; `inject` widens the bottleneck input to take
    /// the frozen extractor's feature maps.
    Recon { inject: bool },
}

/// Parameters whose imaginary part is structurally zero.
pub fn is_real_param(name: &str) -> bool {
    name.contains(".mlp.")
        || name.ends_with(".lambda")
        || name.ends_with(".m1")
        || name.ends_with(".m2")
}

/// (name, shape) table of one conv block: spatial conv, ModReLU, temporal
/// conv, ModReLU.
fn block_shapes(
    prefix: &str,
    f_in: usize,
    f_out: usize,
    cfg: &ModelConfig,
    out: &mut Vec<(String, Vec<usize>)>,
) {
    out.push((
        format!("{prefix}.sw"),
        vec![f_out, f_in, cfg.k_spatial, cfg.k_spatial],
    ));
    out.push((format!("{prefix}.sb"), vec![f_out]));
    out.push((format!("{prefix}.m1"), vec![f_out]));
    out.push((format!("{prefix}.tw"), vec![f_out, f_out, cfg.k_temporal]));
    out.push((format!("{prefix}.tb"), vec![f_out]));
    out.push((format!("{prefix}.m2"), vec![f_out]));
}

/// Full parameter table for one network.
pub fn param_shapes(cfg: &ModelConfig, kind: NetKind) -> Vec<(String, Vec<usize>)> {
    let (f1, f2) = (cfg.f_base, 2 * cfg.f_base);
    let inject = matches!(kind, NetKind::Recon { inject: true });
    let bot_in = if inject { f2 + cfg.n_fe } else { f2 };
    let mut out = Vec::new();
    for i in 0..cfg.iterations {
        let p = format!("it{i}");
        block_shapes(&format!("{p}.enc1"), 1, f1, cfg, &mut out);
        block_shapes(&format!("{p}.enc2"), f1, f2, cfg, &mut out);
        block_shapes(&format!("{p}.bot"), bot_in, cfg.n_fe, cfg, &mut out);
        block_shapes(&format!("{p}.dec1"), cfg.n_fe + f2, f2, cfg, &mut out);
        block_shapes(&format!("{p}.dec2"), f2 + f1, f1, cfg, &mut out);
        out.push((format!("{p}.proj.w"), vec![1, f1, 1, 1]));
        out.push((format!("{p}.proj.b"), vec![1]));
        if kind == NetKind::Feature {
            out.push((format!("{p}.mlp.w1"), vec![2 * cfg.n_fe, cfg.mlp_hidden]));
            out.push((format!("{p}.mlp.b1"), vec![cfg.mlp_hidden]));
            out.push((format!("{p}.mlp.w2"), vec![cfg.mlp_hidden, cfg.n_fm]));
            out.push((format!("{p}.mlp.b2"), vec![cfg.n_fm]));
        }
        out.push((format!("{p}.lambda"), vec![1]));
    }
    out
}

/// Glorot-style init, variance halved across re/im for complex weights;
/// biases and ModReLU offsets zero; final projections zero (so the UNet
/// starts as the identity); DC step sizes 1.
pub fn init_params(cfg: &ModelConfig, kind: NetKind, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(cfg, kind) {
        let t = if name.ends_with(".lambda") {
            CTensor::from_data(&[1], vec![Complex64::new(1.0, 0.0)])?
        } else if name.ends_with(".proj.w") || shape.len() == 1 {
            // biases, modrelu offsets, and the residual-identity projection
            CTensor::zeros(&shape)
        } else if name.contains(".mlp.") {
            // real Glorot for the MLP weights
            let fan = (shape[0] + shape[1]) as f64;
            let std = (2.0 / fan).sqrt();
            let mut t = CTensor::randn(&shape, std * 2f64.sqrt(), &mut rng);
            for v in t.data_mut() {
                *v = Complex64::new(v.re, 0.0);
            }
            t
        } else {
            // complex conv weights: fan counts kernel taps
            let k: usize = shape[2..].iter().product();
            let fan = ((shape[0] + shape[1]) * k) as f64;
            let std = (2.0 / fan).sqrt();
            CTensor::randn(&shape, std, &mut rng)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Lazily registers parameter tensors as graph leaves (trainable) or
/// constants (frozen), caching node ids by name.
pub struct ParamNodes<'a> {
    params: &'a ParamSet,
    trainable: bool,
    /// Optional name prefix distinguishing two networks in one graph.
    scope: String,
    ids: HashMap<String, NodeId>,
}

impl<'a> ParamNodes<'a> {
    pub fn new(params: &'a ParamSet, trainable: bool, scope: &str) -> Self {
        ParamNodes {
            params,
            trainable,
            scope: scope.to_string(),
            ids: HashMap::new(),
        }
    }

    /// Wraps node ids that were already registered elsewhere (e.g. by a
    /// finite-difference harness).
    pub fn with_ids(params: &'a ParamSet, ids: HashMap<String, NodeId>) -> Self {
        ParamNodes {
            params,
            trainable: false,
            scope: String::new(),
            ids,
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?
            .clone();
        let id = if self.trainable {
            g.param(&format!("{}{}", self.scope, name), value)
        } else {
            g.constant(value)
        };
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }
}

/// conv -> modrelu -> temporal conv -> modrelu
fn conv_block(g: &mut Graph, p: &mut ParamNodes, prefix: &str, x: NodeId) -> Result<NodeId> {
    let sw = p.get(g, &format!("{prefix}.sw"))?;
    let sb = p.get(g, &format!("{prefix}.sb"))?;
    let m1 = p.get(g, &format!("{prefix}.m1"))?;
    let tw = p.get(g, &format!("{prefix}.tw"))?;
    let tb = p.get(g, &format!("{prefix}.tb"))?;
    let m2 = p.get(g, &format!("{prefix}.m2"))?;
    let h = g.conv2d(x, sw, sb)?;
    let h = g.modrelu(h, m1)?;
    let h = g.conv1d_temporal(h, tw, tb)?;
    g.modrelu(h, m2)
}

pub struct UNetOut {
    pub out: NodeId,
    /// Bottleneck feature map [t, x/4, y/4, n_fe].
    pub feature: NodeId,
}

/// Two-stage encoder/decoder with skip connections, optional feature
/// injection ahead of the bottleneck, a zero-initialized 1x1 projection,
/// and a residual connection from input to output.
///
/// `x` is a channel-last image [t, x, y, 1]; `prefix` selects the iteration
/// ("it0", "it1", ...).
pub fn unet_forward(
    g: &mut Graph,
    p: &mut ParamNodes,
    cfg: &ModelConfig,
    prefix: &str,
    x: NodeId,
    inject: Option<NodeId>,
) -> Result<UNetOut> {
    let sh = g.value(x).shape().to_vec();
    if sh.len() != 4 || sh[3] != 1 {
        return Err(Error::Invalid(format!(
            "unet input must be [t,x,y,1], got {sh:?}"
        )));
    }
    if !sh[1].is_multiple_of(4) || !sh[2].is_multiple_of(4) {
        return Err(Error::Invalid(
            "unet spatial dims must be multiples of 4".into(),
        ));
    }
    let e1 = conv_block(g, p, &format!("{prefix}.enc1"), x)?;
    let d1 = g.avg_pool2(e1)?;
    let e2 = conv_block(g, p, &format!("{prefix}.enc2"), d1)?;
    let d2 = g.avg_pool2(e2)?;
    let bot_in = match inject {
        Some(f) => {
            let fs = g.value(f).shape();
            let want = cfg.feature_shape(sh[0], sh[1], sh[2]);
            if fs != want {
                return Err(Error::shape(
                    "injected feature vs bottleneck grid",
                    fs,
                    &want,
                ));
            }
            g.concat_last(d2, f)?
        }
        None => d2,
    };
    let feature = conv_block(g, p, &format!("{prefix}.bot"), bot_in)?;
    let u1 = g.upsample2(feature)?;
    let c1 = g.concat_last(u1, e2)?;
    let r1 = conv_block(g, p, &format!("{prefix}.dec1"), c1)?;
    let u2 = g.upsample2(r1)?;
    let c2 = g.concat_last(u2, e1)?;
    let r2 = conv_block(g, p, &format!("{prefix}.dec2"), c2)?;
    let pw = p.get(g, &format!("{prefix}.proj.w"))?;
    let pb = p.get(g, &format!("{prefix}.proj.b"))?;
    let proj = g.conv2d(r2, pw, pb)?;
    let out = g.add(proj, x)?;
    Ok(UNetOut { out, feature })
}

/// x_next = x - λ · Aᴴ(Ax − y), with λ a trainable scalar node.
pub fn dc_step(
    g: &mut Graph,
    op: &Arc<EncodingOperator>,
    x: NodeId,
    y: NodeId,
    lambda: NodeId,
) -> Result<NodeId> {
    let ax = g.encode_forward(op, x)?;
    let r = g.sub(ax, y)?;
    let ar = g.encode_adjoint(op, r)?;
    let step = g.scale_by_node(ar, lambda)?;
    g.sub(x, step)
}

/// Two affine layers with a ReLU between, applied per frame to the pooled
/// real/imag-concatenated bottleneck feature: [t, 2·n_fe] -> [t, n_fm].
pub fn mlp_head(
    g: &mut Graph,
    p: &mut ParamNodes,
    prefix: &str,
    feature: NodeId,
) -> Result<NodeId> {
    let pooled = g.mean_spatial(feature)?;
    let v = g.re_im_concat(pooled)?;
    let w1 = p.get(g, &format!("{prefix}.mlp.w1"))?;
    let b1 = p.get(g, &format!("{prefix}.mlp.b1"))?;
    let w2 = p.get(g, &format!("{prefix}.mlp.w2"))?;
    let b2 = p.get(g, &format!("{prefix}.mlp.b2"))?;
    let h = g.matmul(v, w1)?;
    let h = g.add_row_vec(h, b1)?;
    let h = g.relu_re(h);
    let h = g.matmul(h, w2)?;
    g.add_row_vec(h, b2)
}

pub struct IterOut {
    pub image: NodeId,
    pub feature: NodeId,
    /// Present on the feature-extraction path only.
    pub embedding: Option<NodeId>,
}

/// One unrolled pass. `with_mlp` adds the embedding head per iteration;
/// `inject` supplies one frozen feature map per iteration.
#[allow(clippy::too_many_arguments)]
fn unrolled_forward(
    g: &mut Graph,
    p: &mut ParamNodes,
    cfg: &ModelConfig,
    x_u: NodeId,
    y: NodeId,
    op: &Arc<EncodingOperator>,
    with_mlp: bool,
    inject: Option<&[NodeId]>,
) -> Result<Vec<IterOut>> {
    if let Some(f) = inject {
        if f.len() != cfg.iterations {
            return Err(Error::Config(
                "need one injected feature per iteration".into(),
            ));
        }
    }
    let ish = g.value(x_u).shape().to_vec();
    if ish.len() != 3 {
        return Err(Error::Invalid("unrolled input must be [t,x,y]".into()));
    }
    let mut outs = Vec::with_capacity(cfg.iterations);
    let mut x = x_u;
    for i in 0..cfg.iterations {
        let prefix = format!("it{i}");
        let x4 = g.reshape(x, &[ish[0], ish[1], ish[2], 1])?;
        let u = unet_forward(g, p, cfg, &prefix, x4, inject.map(|f| f[i]))?;
        let x3 = g.reshape(u.out, &ish)?;
        let embedding = if with_mlp {
            Some(mlp_head(g, p, &prefix, u.feature)?)
        } else {
            None
        };
        let lambda = p.get(g, &format!("{prefix}.lambda"))?;
        x = dc_step(g, op, x3, y, lambda)?;
        outs.push(IterOut {
            image: x,
            feature: u.feature,
            embedding,
        });
    }
    Ok(outs)
}

/// Feature-extraction pass: per iteration returns the DC-corrected image,
/// the bottleneck feature, and the MLP embedding.
pub fn fenet_forward(
    g: &mut Graph,
    p: &mut ParamNodes,
    cfg: &ModelConfig,
    x_u: NodeId,
    y: NodeId,
    op: &Arc<EncodingOperator>,
) -> Result<Vec<IterOut>> {
    unrolled_forward(g, p, cfg, x_u, y, op, true, None)
}

/// Reconstruction pass. With a frozen extractor present, the extractor is
/// run in lockstep on the same (x_u, y) and its per-iteration features are
/// concatenated ahead of the reconstructor's bottleneck.
pub fn reconnet_forward(
    g: &mut Graph,
    recon: &mut ParamNodes,
    cfg: &ModelConfig,
    x_u: NodeId,
    y: NodeId,
    op: &Arc<EncodingOperator>,
    fe: Option<(&mut ParamNodes, &ModelConfig)>,
) -> Result<NodeId> {
    let inject = match fe {
        Some((fe_nodes, fe_cfg)) => {
            check_congruence(fe_cfg, cfg)?;
            let fe_outs = unrolled_forward(g, fe_nodes, fe_cfg, x_u, y, op, false, None)?;
            Some(fe_outs.into_iter().map(|o| o.feature).collect::<Vec<_>>())
        }
        None => None,
    };
    let outs = unrolled_forward(g, recon, cfg, x_u, y, op, false, inject.as_deref())?;
    Ok(outs.last().expect("iterations >= 1").image)
}
