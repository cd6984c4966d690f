//! Adam optimizer, the two training loops (feature learning and
//! reconstruction), inference, and checkpointing.
//!
//! Both loops are self-supervised: the loss paths consume only undersampled
//! measurements. The ground-truth access counter from the phantom module is
//! sampled around every loop so tests can prove the training code never
//! peeks at the reference images.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::container::{ContainerReader, ContainerWriter, DatasetReader};
use crate::error::{Error, Result};
use crate::gradcheck::ParamSet;
use crate::graph::{Gradients, Graph};
use crate::loss::{
    cross_kspace, feature_total_loss, image_consistency, infonce, vicreg, ContrastiveConfig,
    KspaceLossForm, VicregWeights,
};
use crate::model::{
    check_congruence, fenet_forward, init_params, is_real_param, reconnet_forward, ModelConfig,
    NetKind, ParamNodes,
};
use crate::mri::EncodingOperator;
use crate::phantom::{ground_truth_reads, make_feature_batch, make_recon_batch, CineSample};
use crate::sampling::FeatureMode;
use crate::tensor::CTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter; complex parameters carry independent
/// moment streams for the real and imaginary components (the second moment
/// tensor stores the componentwise squares in its re/im slots).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| -> ParamSet {
            p.iter()
                .map(|(k, t)| (k.clone(), CTensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            cfg,
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters flagged real by name get their
/// gradient projected onto the real axis first, so imaginary parts stay 0.
/// Parameters unreachable from the loss carry a zero gradient and stay put.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let mut g = grads.get(name, p.shape());
        if is_real_param(name) {
            for z in g.data_mut() {
                z.im = 0.0;
            }
        }
        let m = state.m.get_mut(name).expect("moment shape mismatch");
        let v = state.v.get_mut(name).expect("moment shape mismatch");
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = m.data()[i];
            let vi = v.data()[i];
            let m_new = num_complex::Complex64::new(
                c.beta1 * mi.re + (1.0 - c.beta1) * gi.re,
                c.beta1 * mi.im + (1.0 - c.beta1) * gi.im,
            );
            let v_new = num_complex::Complex64::new(
                c.beta2 * vi.re + (1.0 - c.beta2) * gi.re * gi.re,
                c.beta2 * vi.im + (1.0 - c.beta2) * gi.im * gi.im,
            );
            m.data_mut()[i] = m_new;
            v.data_mut()[i] = v_new;
            let step_re = c.lr * (m_new.re / bc1) / ((v_new.re / bc2).sqrt() + c.eps);
            let step_im = c.lr * (m_new.im / bc1) / ((v_new.im / bc2).sqrt() + c.eps);
            let pi = p.data()[i];
            p.data_mut()[i] = num_complex::Complex64::new(pi.re - step_re, pi.im - step_im);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Contrastive,
    Vicreg,
    Recon,
    /// Reconstruction without feature injection.
    ReconAblation,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(TrainMode::Contrastive),
            "vicreg" => Ok(TrainMode::Vicreg),
            "recon" => Ok(TrainMode::Recon),
            "recon-ablation" => Ok(TrainMode::ReconAblation),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Contrastive => "contrastive",
            TrainMode::Vicreg => "vicreg",
            TrainMode::Recon => "recon",
            TrainMode::ReconAblation => "recon-ablation",
        }
    }
}

/// Which terms of the reconstruction loss are active; the single-term
/// settings exist for the loss ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossComponents {
    #[default]
    Both,
    ImageOnly,
    KspaceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub vicreg: VicregWeights,
    pub zeta: f64,
    pub ksp_form: KspaceLossForm,
    pub loss_components: LossComponents,
    /// Nominal acceleration of the initial undersampling in Step 2.
    pub initial_r: f64,
}

impl TrainConfig {
    pub fn defaults_for(mode: TrainMode) -> Self {
        let epochs = match mode {
            TrainMode::Contrastive | TrainMode::Vicreg => 30,
            TrainMode::Recon | TrainMode::ReconAblation => 200,
        };
        TrainConfig {
            mode,
            epochs,
            seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            contrastive: ContrastiveConfig::default(),
            vicreg: VicregWeights::default(),
            zeta: 1e-9,
            ksp_form: KspaceLossForm::Charbonnier,
            loss_components: LossComponents::default(),
            initial_r: 2.0,
        }
    }

    /// Stable digest over every field that affects the trained artifact.
    pub fn fingerprint(&self) -> String {
        let m = &self.model;
        let desc = format!(
            "mode={};epochs={};seed={};lr={};b1={};b2={};eps={};fb={};nfe={};nfm={};mh={};it={};ks={};kt={};tau={};vl={};vm={};vn={};vg={};ve={};zeta={};form={:?};r0={}",
            self.mode.name(),
            self.epochs,
            self.seed,
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            m.f_base,
            m.n_fe,
            m.n_fm,
            m.mlp_hidden,
            m.iterations,
            m.k_spatial,
            m.k_temporal,
            self.contrastive.tau,
            self.vicreg.lambda,
            self.vicreg.mu,
            self.vicreg.nu,
            self.vicreg.gamma,
            self.vicreg.epsilon,
            self.zeta,
            self.ksp_form,
            self.initial_r,
        );
        let desc = format!("{desc};comps={:?}", self.loss_components);
        let mut h = Sha256::new();
        h.update(desc.as_bytes());
        let out = h.finalize();
        out.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

pub fn write_epoch_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,mean_loss,wall_secs\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.wall_secs));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub adam: Option<AdamState>,
    pub kind: NetKind,
    pub model: ModelConfig,
    pub fingerprint: String,
    pub step: u64,
}

fn kind_name(kind: NetKind) -> &'static str {
    match kind {
        NetKind::Feature => "feature",
        NetKind::Recon { inject: true } => "recon-inject",
        NetKind::Recon { inject: false } => "recon",
    }
}

fn parse_kind(s: &str) -> Result<NetKind> {
    match s {
        "feature" => Ok(NetKind::Feature),
        "recon-inject" => Ok(NetKind::Recon { inject: true }),
        "recon" => Ok(NetKind::Recon { inject: false }),
        other => Err(Error::Format(format!("unknown checkpoint kind {other:?}"))),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = ContainerWriter::new();
    w.set_meta("kind", "checkpoint");
    w.set_meta("section", "CKPT");
    w.set_meta("net", kind_name(ckpt.kind));
    w.set_meta("fingerprint", &ckpt.fingerprint);
    w.set_meta("step", ckpt.step);
    let m = &ckpt.model;
    w.set_meta("f_base", m.f_base);
    w.set_meta("n_fe", m.n_fe);
    w.set_meta("n_fm", m.n_fm);
    w.set_meta("mlp_hidden", m.mlp_hidden);
    w.set_meta("iterations", m.iterations);
    w.set_meta("k_spatial", m.k_spatial);
    w.set_meta("k_temporal", m.k_temporal);
    for (name, t) in &ckpt.params {
        w.add_tensor_wide(&format!("param.{name}"), t)?;
    }
    if let Some(adam) = &ckpt.adam {
        w.set_meta("adam_lr", adam.cfg.lr);
        w.set_meta("adam_beta1", adam.cfg.beta1);
        w.set_meta("adam_beta2", adam.cfg.beta2);
        w.set_meta("adam_eps", adam.cfg.eps);
        w.set_meta("adam_step", adam.step);
        for (name, t) in &adam.m {
            w.add_tensor_wide(&format!("adam.m.{name}"), t)?;
        }
        for (name, t) in &adam.v {
            w.add_tensor_wide(&format!("adam.v.{name}"), t)?;
        }
    }
    w.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = ContainerReader::open(path)?;
    if r.meta("kind") != Some("checkpoint") {
        return Err(Error::Format("not a checkpoint container".into()));
    }
    let kind = parse_kind(r.require_meta("net")?)?;
    let model = ModelConfig {
        f_base: r.meta_parse("f_base")?,
        n_fe: r.meta_parse("n_fe")?,
        n_fm: r.meta_parse("n_fm")?,
        mlp_hidden: r.meta_parse("mlp_hidden")?,
        iterations: r.meta_parse("iterations")?,
        k_spatial: r.meta_parse("k_spatial")?,
        k_temporal: r.meta_parse("k_temporal")?,
    };
    let fingerprint = r.require_meta("fingerprint")?.to_string();
    let step: u64 = r.meta_parse("step")?;
    let names: Vec<String> = r.tensor_names().map(str::to_string).collect();
    let mut params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for n in names {
        if let Some(p) = n.strip_prefix("param.") {
            params.insert(p.to_string(), r.read_tensor(&n)?);
        } else if let Some(p) = n.strip_prefix("adam.m.") {
            m.insert(p.to_string(), r.read_tensor(&n)?);
        } else if let Some(p) = n.strip_prefix("adam.v.") {
            v.insert(p.to_string(), r.read_tensor(&n)?);
        }
    }
    let adam = if r.meta("adam_step").is_some() {
        Some(AdamState {
            cfg: AdamConfig {
                lr: r.meta_parse("adam_lr")?,
                beta1: r.meta_parse("adam_beta1")?,
                beta2: r.meta_parse("adam_beta2")?,
                eps: r.meta_parse("adam_eps")?,
            },
            m,
            v,
            step: r.meta_parse("adam_step")?,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        params,
        adam,
        kind,
        model,
        fingerprint,
        step,
    })
}

fn feature_mode(mode: TrainMode) -> Result<FeatureMode> {
    match mode {
        TrainMode::Contrastive => Ok(FeatureMode::Contrastive),
        TrainMode::Vicreg => Ok(FeatureMode::Vicreg),
        _ => Err(Error::Config(
            "feature training requires contrastive or vicreg mode".into(),
        )),
    }
}

/// Step 1: train the feature extractor on re-undersampled pairs.
pub fn train_feature_extractor(
    cfg: &TrainConfig,
    data: &mut DatasetReader,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let fmode = feature_mode(cfg.mode)?;
    cfg.model.validate()?;
    let n_train = data.info.n_train;
    if n_train == 0 || (fmode == FeatureMode::Contrastive && n_train < 2) {
        return Err(Error::Config(
            "contrastive feature learning needs at least two training subjects".into(),
        ));
    }
    let samples: Vec<CineSample> = (0..n_train)
        .map(|i| data.read_sample(i))
        .collect::<Result<_>>()?;
    let gt_before = ground_truth_reads();

    let mut params = init_params(&cfg.model, NetKind::Feature, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfeed_f00d);
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for a in 0..n_train {
            let b = if n_train > 1 {
                // uniform draw over the other subjects
                let mut b = rng.gen_range(0..n_train - 1);
                if b >= a {
                    b += 1;
                }
                b
            } else {
                a
            };
            let batch = make_feature_batch(&samples[a], &samples[b], fmode, &mut rng)?;

            let mut g = Graph::new();
            let mut nodes = ParamNodes::new(&params, true, "");
            let x1 = g.constant(batch.x1u.clone());
            let y1 = g.constant(batch.y1.clone());
            let out1 = fenet_forward(&mut g, &mut nodes, &cfg.model, x1, y1, &batch.op1)?;
            let x2 = g.constant(batch.x2u.clone());
            let y2 = g.constant(batch.y2.clone());
            let out2 = fenet_forward(&mut g, &mut nodes, &cfg.model, x2, y2, &batch.op2)?;
            let out3 = match (&batch.x3u, &batch.y3, &batch.op3) {
                (Some(x3u), Some(y3), Some(op3)) => {
                    let x3 = g.constant(x3u.clone());
                    let y3 = g.constant(y3.clone());
                    Some(fenet_forward(&mut g, &mut nodes, &cfg.model, x3, y3, op3)?)
                }
                _ => None,
            };

            let mut per_iter = Vec::with_capacity(cfg.model.iterations);
            for i in 0..cfg.model.iterations {
                let e1 = out1[i].embedding.expect("feature path has embeddings");
                let e2 = out2[i].embedding.expect("feature path has embeddings");
                let li = match (&out3, fmode) {
                    (Some(o3), FeatureMode::Contrastive) => {
                        let e3 = o3[i].embedding.expect("feature path has embeddings");
                        infonce(&mut g, e1, e2, e3, &cfg.contrastive)?
                    }
                    _ => vicreg(&mut g, e1, e2, &cfg.vicreg)?,
                };
                per_iter.push(li);
            }
            let loss = feature_total_loss(&mut g, &per_iter)?;
            loss_sum += g.value(loss).scalar_value().re;
            let grads = g.backward(loss)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / n_train as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    assert_eq!(
        ground_truth_reads(),
        gt_before,
        "feature training must never read ground truth"
    );
    let step = adam.step;
    Ok((
        Checkpoint {
            params,
            adam: Some(adam),
            kind: NetKind::Feature,
            model: cfg.model,
            fingerprint: cfg.fingerprint(),
            step,
        },
        log,
    ))
}

/// Step 2: train the reconstruction network; the optional feature extractor
/// is frozen and only supplies bottleneck features.
pub fn train_reconstruction(
    cfg: &TrainConfig,
    data: &mut DatasetReader,
    fe: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    match cfg.mode {
        TrainMode::Recon => {
            if fe.is_none() {
                return Err(Error::Config(
                    "recon mode needs a feature checkpoint (use recon-ablation to skip)".into(),
                ));
            }
        }
        TrainMode::ReconAblation => {
            if fe.is_some() {
                return Err(Error::Config("ablation mode must not get features".into()));
            }
        }
        _ => {
            return Err(Error::Config(
                "reconstruction training mode required".into(),
            ))
        }
    }
    cfg.model.validate()?;
    if let Some(f) = fe {
        if f.kind != NetKind::Feature {
            return Err(Error::CheckpointMismatch(
                "feature checkpoint does not contain a feature network".into(),
            ));
        }
        check_congruence(&f.model, &cfg.model)?;
    }
    let n_train = data.info.n_train;
    if n_train == 0 {
        return Err(Error::Config("dataset has no training subjects".into()));
    }
    let samples: Vec<CineSample> = (0..n_train)
        .map(|i| data.read_sample(i))
        .collect::<Result<_>>()?;
    let gt_before = ground_truth_reads();

    let inject = fe.is_some();
    let mut params = init_params(&cfg.model, NetKind::Recon { inject }, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0de_cafe);
    let mut log = Vec::new();
    let fe_snapshot = fe.map(|f| f.params.clone());

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for sample in samples.iter().take(n_train) {
            let batch = make_recon_batch(sample, cfg.initial_r, &mut rng)?;
            let mut g = Graph::new();
            let mut nodes = ParamNodes::new(&params, true, "");
            let x1 = g.constant(batch.x1.clone());
            let y1 = g.constant(batch.y1.clone());
            let x2 = g.constant(batch.x2.clone());
            let y2 = g.constant(batch.y2.clone());
            let x1p = match fe {
                Some(f) => {
                    let mut fe_nodes = ParamNodes::new(&f.params, false, "fe.");
                    reconnet_forward(
                        &mut g,
                        &mut nodes,
                        &cfg.model,
                        x1,
                        y1,
                        &batch.op1,
                        Some((&mut fe_nodes, &f.model)),
                    )?
                }
                None => reconnet_forward(&mut g, &mut nodes, &cfg.model, x1, y1, &batch.op1, None)?,
            };
            let x2p = match fe {
                Some(f) => {
                    let mut fe_nodes = ParamNodes::new(&f.params, false, "fe.");
                    reconnet_forward(
                        &mut g,
                        &mut nodes,
                        &cfg.model,
                        x2,
                        y2,
                        &batch.op2,
                        Some((&mut fe_nodes, &f.model)),
                    )?
                }
                None => reconnet_forward(&mut g, &mut nodes, &cfg.model, x2, y2, &batch.op2, None)?,
            };
            let loss = match cfg.loss_components {
                LossComponents::ImageOnly => image_consistency(&mut g, x1p, x2p)?,
                LossComponents::KspaceOnly => cross_kspace(
                    &mut g,
                    x1p,
                    x2p,
                    y1,
                    y2,
                    &batch.op1,
                    &batch.op2,
                    cfg.zeta,
                    cfg.ksp_form,
                )?,
                LossComponents::Both => {
                    let img = image_consistency(&mut g, x1p, x2p)?;
                    let ksp = cross_kspace(
                        &mut g,
                        x1p,
                        x2p,
                        y1,
                        y2,
                        &batch.op1,
                        &batch.op2,
                        cfg.zeta,
                        cfg.ksp_form,
                    )?;
                    g.add(img, ksp)?
                }
            };
            loss_sum += g.value(loss).scalar_value().re;
            let grads = g.backward(loss)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / n_train as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    assert_eq!(
        ground_truth_reads(),
        gt_before,
        "reconstruction training must never read ground truth"
    );
    if let (Some(snap), Some(f)) = (fe_snapshot, fe) {
        for (k, t) in &snap {
            assert_eq!(
                t.data(),
                f.params[k].data(),
                "frozen feature parameter {k} changed during training"
            );
        }
    }
    let step = adam.step;
    Ok((
        Checkpoint {
            params,
            adam: Some(adam),
            kind: NetKind::Recon { inject },
            model: cfg.model,
            fingerprint: cfg.fingerprint(),
            step,
        },
        log,
    ))
}

/// Inference: x' = recon(Aᴴy, y). Single mask, no re-undersampling.
pub fn reconstruct(
    ckpt: &Checkpoint,
    fe: Option<&Checkpoint>,
    y: &CTensor,
    op: &Arc<EncodingOperator>,
) -> Result<CTensor> {
    match (ckpt.kind, fe) {
        (NetKind::Recon { inject: true }, None) => {
            return Err(Error::CheckpointMismatch(
                "this reconstruction checkpoint needs a feature checkpoint".into(),
            ))
        }
        (NetKind::Recon { inject: false }, Some(_)) => {
            return Err(Error::CheckpointMismatch(
                "ablation checkpoint does not take features".into(),
            ))
        }
        (NetKind::Feature, _) => {
            return Err(Error::CheckpointMismatch(
                "cannot reconstruct with a feature checkpoint".into(),
            ))
        }
        _ => {}
    }
    if let Some(f) = fe {
        if f.kind != NetKind::Feature {
            return Err(Error::CheckpointMismatch(
                "second checkpoint must be a feature network".into(),
            ));
        }
        check_congruence(&f.model, &ckpt.model)?;
    }
    let x_u = op.adjoint(y)?;
    let mut g = Graph::new();
    let mut nodes = ParamNodes::new(&ckpt.params, false, "");
    let xn = g.constant(x_u);
    let yn = g.constant(y.clone());
    let out = match fe {
        Some(f) => {
            let mut fe_nodes = ParamNodes::new(&f.params, false, "fe.");
            reconnet_forward(
                &mut g,
                &mut nodes,
                &ckpt.model,
                xn,
                yn,
                op,
                Some((&mut fe_nodes, &f.model)),
            )?
        }
        None => reconnet_forward(&mut g, &mut nodes, &ckpt.model, xn, yn, op, None)?,
    };
    Ok(g.value(out).clone())
}
