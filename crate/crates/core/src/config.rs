//! TOML training configuration. Every key is optional; omitted keys fall
//! back to the mode's defaults, so a config file only states what it
//! overrides. The `mode` given on the command line wins over the file.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::loss::{KspaceLossForm, VicregWeights};
use crate::model::ModelConfig;
use crate::train::{LossComponents, TrainConfig, TrainMode};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    epochs: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    tau: Option<f64>,
    zeta: Option<f64>,
    initial_r: Option<f64>,
    kspace_loss: Option<String>,
    loss_components: Option<String>,
    #[serde(default)]
    model: FileModel,
    #[serde(default)]
    vicreg: FileVicreg,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileModel {
    f_base: Option<usize>,
    n_fe: Option<usize>,
    n_fm: Option<usize>,
    mlp_hidden: Option<usize>,
    iterations: Option<usize>,
    k_spatial: Option<usize>,
    k_temporal: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileVicreg {
    lambda: Option<f64>,
    mu: Option<f64>,
    nu: Option<f64>,
    gamma: Option<f64>,
    epsilon: Option<f64>,
}

fn apply(file: FileConfig, mut cfg: TrainConfig) -> Result<TrainConfig> {
    if let Some(v) = file.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = file.tau {
        cfg.contrastive.tau = v;
    }
    if let Some(v) = file.zeta {
        cfg.zeta = v;
    }
    if let Some(v) = file.initial_r {
        cfg.initial_r = v;
    }
    if let Some(v) = &file.kspace_loss {
        cfg.ksp_form = match v.as_str() {
            "charbonnier" => KspaceLossForm::Charbonnier,
            "global-norm" => KspaceLossForm::GlobalNorm,
            other => return Err(Error::Config(format!("unknown kspace_loss {other:?}"))),
        };
    }
    if let Some(v) = &file.loss_components {
        cfg.loss_components = match v.as_str() {
            "both" => LossComponents::Both,
            "image-only" => LossComponents::ImageOnly,
            "kspace-only" => LossComponents::KspaceOnly,
            other => return Err(Error::Config(format!("unknown loss_components {other:?}"))),
        };
    }
    let m = &file.model;
    let d = ModelConfig::default();
    cfg.model = ModelConfig {
        f_base: m.f_base.unwrap_or(d.f_base),
        n_fe: m.n_fe.unwrap_or(d.n_fe),
        n_fm: m.n_fm.unwrap_or(d.n_fm),
        mlp_hidden: m.mlp_hidden.unwrap_or(d.mlp_hidden),
        iterations: m.iterations.unwrap_or(d.iterations),
        k_spatial: m.k_spatial.unwrap_or(d.k_spatial),
        k_temporal: m.k_temporal.unwrap_or(d.k_temporal),
    };
    let v = &file.vicreg;
    let dv = VicregWeights::default();
    cfg.vicreg = VicregWeights {
        lambda: v.lambda.unwrap_or(dv.lambda),
        mu: v.mu.unwrap_or(dv.mu),
        nu: v.nu.unwrap_or(dv.nu),
        gamma: v.gamma.unwrap_or(dv.gamma),
        epsilon: v.epsilon.unwrap_or(dv.epsilon),
    };
    cfg.model.validate()?;
    if cfg.contrastive.tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    if cfg.zeta <= 0.0 {
        return Err(Error::Config("zeta must be positive".into()));
    }
    if cfg.adam.lr <= 0.0 {
        return Err(Error::Config("lr must be positive".into()));
    }
    Ok(cfg)
}

/// Build a TrainConfig for `mode`, overridden by the optional TOML file and
/// then by an optional command-line seed.
pub fn load_train_config(
    mode: TrainMode,
    path: Option<&Path>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::defaults_for(mode);
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        let file: FileConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{p:?}: {e}")))?;
        cfg = apply(file, cfg)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}
