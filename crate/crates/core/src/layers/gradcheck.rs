//! Central finite-difference verification of [`ArchGraph::backward`].

use serde::Serialize;

use super::graph::{ArchGraph, BnConfig, LayerKind, Mode};
use crate::data::Rng;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::train::losses::Targets;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar parameters compared.
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Scales the analytic gradient of the first parameter by 1.5 so callers
    /// can confirm that a broken backward pass is caught.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { eps: 1e-4, inject_fault: false }
    }
}

/// Draws every batch-norm scale from `U(0.5, 1.5)` and shift from
/// `U(-0.5, 0.5)`.
///
/// Freshly built graphs have unit scales and zero shifts, which puts
/// summed residual branches exactly on ReLU kinks where finite differences
/// are meaningless; checking at a random point avoids that.
pub fn randomize_batch_norm(graph: &mut ArchGraph<f64>, seed: u64) {
    let mut rng = Rng::with_stream(seed, 11);
    let names: Vec<(String, String)> = graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::BatchNorm { .. }))
        .map(|n| (n.params[0].clone(), n.params[1].clone()))
        .collect();
    for (gamma, beta) in names {
        for v in graph.params_mut().get_mut(&gamma).expect("gamma").data_mut() {
            *v = rng.uniform_range(0.5, 1.5);
        }
        for v in graph.params_mut().get_mut(&beta).expect("beta").data_mut() {
            *v = rng.uniform_range(-0.5, 0.5);
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of every trainable scalar parameter with
/// `(L(θ + eps) - L(θ - eps)) / (2 eps)`.
///
/// Runs in train mode with dropout disabled and a batch-norm momentum of
/// zero; the caller's graph is left untouched.
pub fn gradcheck(graph: &ArchGraph<f64>, targets: &Targets, x: &Tensor<f64>, eps: f64) -> Result<GradcheckReport> {
    gradcheck_with(graph, targets, x, GradcheckOptions { eps, ..Default::default() })
}

pub fn gradcheck_with(
    graph: &ArchGraph<f64>,
    targets: &Targets,
    x: &Tensor<f64>,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut g = graph.clone();
    g.set_bn_config(BnConfig { momentum: 0.0, ..graph.bn_config() })?;

    let logits = g.forward(x, Mode::Train, None)?;
    let (_, dlogits) = targets.loss(&logits)?;
    let mut analytic = g.backward_with(&dlogits, false)?.params;
    if opts.inject_fault {
        if let Some((_, t)) = analytic.get_index_mut(0) {
            for v in t.data_mut() {
                *v *= 1.5;
            }
        }
    }

    let base = g.forward_values(x)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (name, grad) in &analytic {
        let owner = g.param_owner(name).expect("every trainable entry belongs to a layer");
        for i in 0..grad.len() {
            let original = g.params().require(name)?.data()[i];
            let mut loss_at = |value: f64| -> Result<f64> {
                g.params_mut().get_mut(name).expect("entry").data_mut()[i] = value;
                let out = g.logits_from(&base, owner)?;
                Ok(targets.loss(&out)?.0)
            };
            let plus = loss_at(original + opts.eps)?;
            let minus = loss_at(original - opts.eps)?;
            g.params_mut().get_mut(name).expect("entry").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
