//! Full metric reports for fitted models against a synthetic ground truth.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{
    causal_f1, fit_affine_alignment, mcc, mean_function_l2, regime_f1, AffineAlignment, MccMode, MetricReport,
};
use crate::msm::{forward_backward, regime_graphs, MsmModel, Trajectory};
use crate::sds::{encode_all, SdsModel};
use crate::synthgen::{GroundTruth, SequenceSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Jacobian threshold for graph extraction.
    pub tau: f64,
    /// Cap on true-regime windows used for the mean-function comparison.
    pub max_probes_per_regime: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { tau: 0.05, max_probes_per_regime: 2000 }
    }
}

/// Latent windows grouped by the true regime that generated the next step.
pub fn true_regime_probes(set: &SequenceSet, num_regimes: usize, lag: usize, cap: usize) -> Vec<Vec<Vec<f64>>> {
    let mut probes = vec![Vec::new(); num_regimes];
    for (z, s) in set.latents.iter().zip(&set.regimes) {
        for t in lag..z.len() {
            let k = s[t - lag + 1];
            if probes[k].len() < cap {
                probes[k].push(z.window(t, lag));
            }
        }
    }
    probes
}

/// Scores an estimated prior and its latent estimates of the evaluation set.
/// `alignment` is fitted from the latents unless given.
pub fn evaluate_latents(
    gt: &GroundTruth,
    est_prior: &MsmModel,
    est_latents: &[Trajectory],
    alignment: Option<AffineAlignment>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let truth = &gt.generator.prior;
    let (k_true, k_est) = (truth.num_regimes, est_prior.num_regimes);
    let mut true_labels = Vec::new();
    let mut pred = Vec::new();
    for (z, s) in est_latents.iter().zip(&gt.eval.regimes) {
        let post = forward_backward(est_prior, z)?;
        let map = post.map_regimes();
        // Estimated and true lags may differ; compare the common tail.
        let n = map.len().min(s.len());
        true_labels.extend_from_slice(&s[s.len() - n..]);
        pred.extend_from_slice(&map[map.len() - n..]);
    }
    let f1 = regime_f1(&true_labels, &pred, k_true, k_est)?;
    let z_true = Trajectory::concat(&gt.eval.latents)?;
    let z_est = Trajectory::concat(est_latents)?;
    let same_dim = z_true.dim() == z_est.dim();
    let weak = same_dim.then(|| mcc(&z_true, &z_est, MccMode::Weak)).transpose()?;
    let strong = same_dim.then(|| mcc(&z_true, &z_est, MccMode::Strong)).transpose()?;
    let alignment = match alignment {
        Some(a) => Some(a),
        None if same_dim => fit_affine_alignment(&z_true, &z_est).ok(),
        None => None,
    };
    let comparable = same_dim && truth.lag == est_prior.lag && f1.permutation.iter().all(|&j| j < k_est);
    let mut causal = None;
    let (mut l2, mut r2) = (None, None);
    if let (true, Some(align)) = (comparable, alignment.as_ref()) {
        let est_graphs = regime_graphs(est_prior, est_latents, opts.tau)?;
        causal = Some(causal_f1(&gt.generator.graphs, &est_graphs, &f1.permutation, &align.permutation)?.f1);
        let probes = true_regime_probes(&gt.eval, k_true, truth.lag, opts.max_probes_per_regime);
        if let Ok(fit) = mean_function_l2(truth, est_prior, align, &f1.permutation, &probes) {
            l2 = Some(fit.l2);
            r2 = Some(fit.r2);
        }
    }
    Ok(MetricReport {
        setting: gt.config.setting.clone(),
        seed: gt.config.seed,
        regime_f1: f1.f1,
        weak_mcc: weak.map(|m| m.value),
        strong_mcc: strong.map(|m| m.value),
        causal_f1: causal,
        l2,
        r2,
        regime_permutation: f1.permutation,
        alignment,
    })
}

/// iMSM fitted directly on latents: no alignment is needed.
pub fn evaluate_msm(gt: &GroundTruth, model: &MsmModel, opts: &EvalOptions) -> Result<MetricReport> {
    evaluate_latents(gt, model, &gt.eval.latents, Some(AffineAlignment::identity(model.dim)), opts)
}

/// Full SDS: latents are the encoder means of the evaluation observations.
pub fn evaluate_sds(gt: &GroundTruth, model: &SdsModel, opts: &EvalOptions) -> Result<MetricReport> {
    let latents = encode_all(model, &gt.eval.observations)?;
    evaluate_latents(gt, &model.prior, &latents, None, opts)
}
