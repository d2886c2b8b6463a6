//! Maximum-likelihood fitting of an [`MsmModel`] by mini-batch Adam ascent.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::inference::{accumulate_gradient, log_likelihood, MsmGradient};
use crate::msm::model::{MsmModel, ParamGroup, Trajectory};
use crate::optim::{Adam, LrController, PlateauRule, StepDecay};
use crate::parallel::map_ordered;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Restart 0 starts from the given model, later ones from fresh random parameters.
    pub restarts: usize,
    pub seed: u64,
    pub workers: usize,
    pub plateau: PlateauRule,
    pub step_decay: Option<StepDecay>,
    pub frozen: Vec<ParamGroup>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 7e-3,
            batch_size: 100,
            epochs: 100,
            restarts: 3,
            seed: 0,
            workers: 1,
            plateau: PlateauRule::default(),
            step_decay: None,
            frozen: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub seed: u64,
    /// Mean per-sequence log-likelihood seen during each epoch.
    pub epoch_log_likelihood: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub plateau_decay_epochs: Vec<usize>,
    /// Mean per-sequence training log-likelihood of the final parameters.
    pub final_log_likelihood: Option<f64>,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub restarts: Vec<RestartTrace>,
    pub best_restart: usize,
    pub final_log_likelihood: f64,
    pub plateau_rule: PlateauRule,
    pub model: MsmModel,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn mean_log_likelihood(model: &MsmModel, data: &[Trajectory], workers: usize) -> Result<f64> {
    let lls = map_ordered(data, workers, |_, z| log_likelihood(model, z));
    let mut total = 0.0;
    for ll in lls {
        total += ll?;
    }
    Ok(total / data.len() as f64)
}

/// Mean log-likelihood of `batch` and the gradient of that mean.
pub(crate) fn batch_gradient(model: &MsmModel, batch: &[&Trajectory], workers: usize) -> Result<(f64, MsmGradient)> {
    let scale = 1.0 / batch.len() as f64;
    let parts = map_ordered(batch, workers, |_, z| {
        let mut g = MsmGradient::zeros_like(model);
        accumulate_gradient(model, z, scale, &mut g, None).map(|ll| (ll, g))
    });
    let mut total = MsmGradient::zeros_like(model);
    let mut ll = 0.0;
    for p in parts {
        let (l, g) = p?;
        ll += l * scale;
        total.add_scaled(&g, 1.0);
    }
    Ok((ll, total))
}

fn check_data(model: &MsmModel, data: &[Trajectory]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for z in data {
        if z.dim() != model.dim {
            return Err(Error::shape(format!("trajectory dim {} != model dim {}", z.dim(), model.dim)));
        }
        if z.len() <= model.lag {
            return Err(Error::SequenceTooShort { len: z.len(), lag: model.lag });
        }
    }
    Ok(())
}

fn run_restart(model: &mut MsmModel, data: &[Trajectory], opt: &OptimizerConfig, seed: u64) -> Result<RestartTrace> {
    let mut trace = RestartTrace {
        seed,
        epoch_log_likelihood: Vec::new(),
        learning_rate: Vec::new(),
        plateau_decay_epochs: Vec::new(),
        final_log_likelihood: None,
        diverged: None,
    };
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut adam = Adam::new(opt.learning_rate);
    let mut lr = LrController::new(opt.learning_rate, opt.plateau, opt.step_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = opt.batch_size.max(1);
    for epoch in 0..opt.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(batch) {
            let items: Vec<&Trajectory> = idx.iter().map(|&i| &data[i]).collect();
            let (ll, grad) = batch_gradient(model, &items, opt.workers)?;
            if !ll.is_finite() {
                return Err(Error::Diverged(format!("non-finite log-likelihood in epoch {epoch}")));
            }
            sum += ll * items.len() as f64;
            count += items.len();
            adam.learning_rate = lr.lr();
            step_model(&mut adam, model, &grad, &opt.frozen);
        }
        let epoch_ll = sum / count as f64;
        trace.epoch_log_likelihood.push(epoch_ll);
        trace.learning_rate.push(lr.lr());
        lr.observe(epoch_ll);
        log::debug!("msm epoch {epoch}: mean log-likelihood {epoch_ll:.4}");
    }
    trace.plateau_decay_epochs = lr.plateau_decays.clone();
    Ok(trace)
}

pub(crate) fn step_model(adam: &mut Adam, model: &mut MsmModel, grad: &MsmGradient, frozen: &[ParamGroup]) {
    let grads = grad.param_slices();
    let active: Vec<bool> = grads.iter().map(|(g, _)| !frozen.contains(g)).collect();
    let grads: Vec<&[f64]> = grads.into_iter().map(|(_, s)| s).collect();
    let mut params: Vec<&mut [f64]> = model.param_slices_mut().into_iter().map(|(_, s)| s).collect();
    adam.ascend(&mut params, &grads, &active);
    model.apply_masks();
}

/// Fits `model` to `data`, keeping the restart with the best final training
/// log-likelihood. With zero epochs the given model is returned as is.
pub fn fit_msm(model: &MsmModel, data: &[Trajectory], opt: &OptimizerConfig) -> Result<FitReport> {
    model.validate()?;
    check_data(model, data)?;
    let restarts = if opt.epochs == 0 { 1 } else { opt.restarts.max(1) };
    let mut traces = Vec::with_capacity(restarts);
    let mut best: Option<(usize, f64, MsmModel)> = None;
    for r in 0..restarts {
        let seed = rng::derive_seed(opt.seed, &format!("msm/restart/{r}"));
        let mut candidate = if r == 0 { model.clone() } else { model.reinitialized(&mut rng::stream(seed, "init"))? };
        let mut trace = match run_restart(&mut candidate, data, opt, seed) {
            Ok(t) => t,
            Err(Error::Diverged(msg)) | Err(Error::Numeric(msg)) => {
                log::warn!("restart {r} diverged: {msg}");
                traces.push(RestartTrace {
                    seed,
                    epoch_log_likelihood: Vec::new(),
                    learning_rate: Vec::new(),
                    plateau_decay_epochs: Vec::new(),
                    final_log_likelihood: None,
                    diverged: Some(msg),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        match mean_log_likelihood(&candidate, data, opt.workers) {
            Ok(ll) if ll.is_finite() => {
                trace.final_log_likelihood = Some(ll);
                if best.as_ref().map_or(true, |b| ll > b.1) {
                    best = Some((r, ll, candidate));
                }
            }
            Ok(ll) => trace.diverged = Some(format!("final log-likelihood {ll}")),
            Err(e) => trace.diverged = Some(e.to_string()),
        }
        traces.push(trace);
    }
    let (best_restart, final_log_likelihood, model) =
        best.ok_or_else(|| Error::Diverged(format!("all {restarts} restarts diverged")))?;
    Ok(FitReport { restarts: traces, best_restart, final_log_likelihood, plateau_rule: opt.plateau, model })
}
