//! Central finite-difference gradient checking.
//!
//! The oracle only ever calls the forward pass: a loss is rebuilt from
//! perturbed parameter values and differenced, then compared with the
//! directional derivative Re⟨g, δ⟩ predicted by the backward sweep.

use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::CTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub type ParamSet = BTreeMap<String, CTensor>;

/// Forward builder: given a graph and parameter leaves, produce the loss node.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph, params: &BTreeMap<String, NodeId>) -> NodeId;
}

impl<F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> NodeId> LossBuilder for F {
    fn build(&self, g: &mut Graph, params: &BTreeMap<String, NodeId>) -> NodeId {
        self(g, params)
    }
}

pub fn eval_loss(builder: &impl LossBuilder, params: &ParamSet) -> f64 {
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, value) in params {
        ids.insert(name.clone(), g.param(name, value.clone()));
    }
    let loss = builder.build(&mut g, &ids);
    g.scalar(loss).re
}

pub fn eval_grads(builder: &impl LossBuilder, params: &ParamSet) -> (f64, Gradients) {
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, value) in params {
        ids.insert(name.clone(), g.param(name, value.clone()));
    }
    let loss = builder.build(&mut g, &ids);
    let grads = g.backward(loss).expect("backward");
    (g.scalar(loss).re, grads)
}

/// Report for one checked direction.
#[derive(Debug)]
pub struct DirectionalCheck {
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare backward gradients against central differences along
/// `n_directions` random complex directions per parameter.
///
/// `rel_err = |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn check_gradients(
    builder: &impl LossBuilder,
    params: &ParamSet,
    h: f64,
    n_directions: usize,
    seed: u64,
) -> Vec<DirectionalCheck> {
    let (_, grads) = eval_grads(builder, params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, value) in params {
        let grad = grads.get(name, value.shape());
        for _ in 0..n_directions {
            let delta = CTensor::randn(value.shape(), 1.0, &mut rng);
            // analytic directional derivative: Re⟨g, δ⟩
            let analytic = grad.inner(&delta).re;
            let mut plus = params.clone();
            plus.insert(name.clone(), value.add(&delta.scale_re(h)));
            let mut minus = params.clone();
            minus.insert(name.clone(), value.add(&delta.scale_re(-h)));
            let numeric = (eval_loss(builder, &plus) - eval_loss(builder, &minus)) / (2.0 * h);
            // The 1e-6 floor keeps central-difference roundoff (~1e-11 on an
            // O(1) loss) from failing directions whose true derivative is 0.
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            out.push(DirectionalCheck {
                param: name.clone(),
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    out
}

/// Assert-style wrapper used by tests.
pub fn assert_gradients(
    builder: &impl LossBuilder,
    params: &ParamSet,
    h: f64,
    tol: f64,
    n_directions: usize,
    seed: u64,
) {
    for check in check_gradients(builder, params, h, n_directions, seed) {
        assert!(
            check.rel_err < tol,
            "gradient check failed for {}: analytic {} vs numeric {} (rel err {:.3e})",
            check.param,
            check.analytic,
            check.numeric,
            check.rel_err
        );
    }
}
