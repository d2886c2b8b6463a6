use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::{fit_msm, FitReport, OptimizerConfig, ParamGroup, Trajectory};
use crate::nnet::Mlp;
use crate::optim::{Adam, LrController, PlateauRule, StepDecay};
use crate::parallel::map_ordered;
use crate::rng;
use crate::sds::elbo::{draw_noise, elbo_with_noise, ElboEstimate};
use crate::sds::model::{SdsGradient, SdsModel, SdsParamGroup};
use crate::sds::pca::{pca_fit, Pca};

const MIN_OBS_VAR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub step_decay: Option<StepDecay>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { epochs: 0, learning_rate: 5e-4, step_decay: None }
    }
}

/// The four training stages: iMSM fit on PCA projections, encoder/decoder
/// pre-training with the prior frozen, warmup with `pi` and `Q` frozen, and
/// joint training of everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub init_msm: StageConfig,
    pub init_restarts: usize,
    pub init_plateau: PlateauRule,
    pub pretrain: StageConfig,
    pub warmup: StageConfig,
    pub final_phase: StageConfig,
    /// Defaults to the latent dimension, which the prior lift requires.
    pub pca_dims: Option<usize>,
    pub restarts: usize,
    pub eta: f64,
    pub n_mc: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            init_msm: StageConfig { epochs: 100, learning_rate: 7e-3, step_decay: None },
            init_restarts: 3,
            init_plateau: PlateauRule::default(),
            pretrain: StageConfig { epochs: 40, ..Default::default() },
            warmup: StageConfig { epochs: 10, ..Default::default() },
            final_phase: StageConfig {
                epochs: 700,
                learning_rate: 5e-4,
                step_decay: Some(StepDecay { every: 200, factor: 0.8 }),
            },
            pca_dims: None,
            restarts: 5,
            eta: 0.05,
            n_mc: 1,
            batch_size: 100,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::Config("eta must be non-negative".into()));
        }
        if self.n_mc == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_mc and batch_size must be positive".into()));
        }
        for s in [&self.init_msm, &self.pretrain, &self.warmup, &self.final_phase] {
            if !(s.learning_rate > 0.0) {
                return Err(Error::Config("learning rates must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    /// Mean per-sequence objective (log-likelihood for the iMSM stage) per epoch.
    pub epoch_objective: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdsRestartTrace {
    pub seed: u64,
    /// `init_msm`, `pretrain`, `warmup`, `final`.
    pub stages: Vec<StageTrace>,
    pub init_report: Option<FitReport>,
    pub final_objective: Option<f64>,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdsFitReport {
    pub restarts: Vec<SdsRestartTrace>,
    pub best_restart: usize,
    pub final_objective: f64,
    pub schedule: TrainSchedule,
    pub model: SdsModel,
}

impl SdsFitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean per-sequence objective on `data` with noise streams derived from `seed`.
pub fn mean_objective(model: &SdsModel, data: &[Trajectory], n_mc: usize, eta: f64, seed: u64, workers: usize) -> Result<ElboEstimate> {
    let parts = map_ordered(data, workers, |i, x| {
        let noise = draw_noise(model, x.len(), n_mc, &mut rng::stream(seed, &format!("eval/{i}")));
        elbo_with_noise(model, x, &noise, eta, 1.0, None)
    });
    let mut acc = ElboEstimate { elbo: 0.0, recon_term: 0.0, entropy_term: 0.0, prior_term: 0.0, reg_term: 0.0, n_mc };
    let w = 1.0 / data.len().max(1) as f64;
    for p in parts {
        let e = p?;
        acc.elbo += w * e.elbo;
        acc.recon_term += w * e.recon_term;
        acc.entropy_term += w * e.entropy_term;
        acc.prior_term += w * e.prior_term;
        acc.reg_term += w * e.reg_term;
    }
    Ok(acc)
}

fn lift_linear(net: &mut Mlp, slope: f64, rows: &[Vec<f64>], offset: &[f64], bias: &[f64]) -> bool {
    // net(y) = rows * y + offset_term exactly, using leaky(a) - leaky(-a) = (1 + slope) a.
    let dims = net.dims().to_vec();
    if dims.len() != 3 {
        return false;
    }
    let (din, hidden, dout) = (dims[0], dims[1], dims[2]);
    if dims.len() != 3 || hidden < 2 * din {
        return false;
    }
    let w0 = net.weights_mut(0);
    for i in 0..din {
        for j in 0..din {
            let v = if i == j { 1.0 } else { 0.0 };
            w0[i * din + j] = v;
            w0[(din + i) * din + j] = -v;
        }
    }
    let b0 = net.biases_mut(0);
    for i in 0..din {
        b0[i] = offset[i];
        b0[din + i] = -offset[i];
    }
    let w1 = net.weights_mut(1);
    w1.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..dout {
        for i in 0..din {
            w1[o * hidden + i] = rows[o][i] / (1.0 + slope);
            w1[o * hidden + din + i] = -rows[o][i] / (1.0 + slope);
        }
    }
    net.biases_mut(1).copy_from_slice(bias);
    true
}

/// Sets the decoder to `x = mean + C^T z` and the encoder mean to
/// `z = C (x - mean)`, and the observation noise to the PCA residual variance.
fn initialize_from_pca(model: &mut SdsModel, pca: &Pca, data: &[Trajectory]) {
    let slope = match model.decoder.activation() {
        crate::nnet::Activation::LeakyRelu(a) => a,
        _ => return,
    };
    let (m, n) = (model.latent_dim(), model.obs_dim());
    let ct: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| pca.components[i][j]).collect()).collect();
    let ok_dec = lift_linear(&mut model.decoder, slope, &ct, &vec![0.0; m], &pca.mean);
    // Encoder: hidden pair i computes leaky(+-(c_i . x - c_i . mean)).
    let enc = &mut model.encoder_mean;
    let dims = enc.dims().to_vec();
    let ok_enc = dims.len() == 3 && dims[1] >= 2 * m;
    if ok_enc {
        let hidden = dims[1];
        let shift: Vec<f64> = (0..m).map(|i| -pca.components[i].iter().zip(&pca.mean).map(|(a, b)| a * b).sum::<f64>()).collect();
        let w0 = enc.weights_mut(0);
        w0.iter_mut().for_each(|v| *v *= 0.1);
        for i in 0..m {
            for j in 0..n {
                w0[i * n + j] = pca.components[i][j];
                w0[(m + i) * n + j] = -pca.components[i][j];
            }
        }
        let b0 = enc.biases_mut(0);
        for i in 0..m {
            b0[i] = shift[i];
            b0[m + i] = -shift[i];
        }
        let w1 = enc.weights_mut(1);
        w1.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            w1[i * hidden + i] = 1.0 / (1.0 + slope);
            w1[i * hidden + m + i] = -1.0 / (1.0 + slope);
        }
        enc.biases_mut(1).iter_mut().for_each(|v| *v = 0.0);
    }
    if !(ok_dec && ok_enc) {
        log::warn!("encoder/decoder shapes do not admit the exact PCA initialisation; keeping random weights");
    }
    let mut resid = vec![0.0; n];
    let mut count = 0.0;
    for x in data {
        for t in 0..x.len() {
            let back = pca.reconstruct(&pca.project(x.row(t)));
            for j in 0..n {
                resid[j] += (x.row(t)[j] - back[j]).powi(2);
            }
            count += 1.0;
        }
    }
    let var: Vec<f64> = resid.iter().map(|r| (r / count).max(MIN_OBS_VAR)).collect();
    model.set_obs_noise_diag(&var);
}

fn stage_one(model: &mut SdsModel, data: &[Trajectory], sched: &TrainSchedule, seed: u64) -> Result<FitReport> {
    let m = model.latent_dim();
    let dims = sched.pca_dims.unwrap_or(m);
    if dims != m {
        return Err(Error::Config(format!("pca_dims ({dims}) must equal the latent dimension ({m})")));
    }
    let rows: Vec<&[f64]> = data.iter().flat_map(|x| (0..x.len()).map(move |t| x.row(t))).collect();
    let pca = pca_fit(&rows, dims)?;
    if pca.dims() < m {
        return Err(Error::RankDeficient(format!("observations span only {} of {m} latent dimensions", pca.dims())));
    }
    let projected = data
        .iter()
        .map(|x| x.map_rows(m, |r| pca.project(r)))
        .collect::<Result<Vec<_>>>()?;
    let opt = OptimizerConfig {
        learning_rate: sched.init_msm.learning_rate,
        batch_size: sched.batch_size,
        epochs: sched.init_msm.epochs,
        restarts: sched.init_restarts,
        seed: rng::derive_seed(seed, "init_msm"),
        workers: sched.workers,
        plateau: sched.init_plateau,
        step_decay: sched.init_msm.step_decay,
        frozen: Vec::new(),
    };
    let report = fit_msm(&model.prior, &projected, &opt)?;
    model.prior = report.model.clone();
    initialize_from_pca(model, &pca, data);
    Ok(report)
}

fn batch_gradient(
    model: &SdsModel,
    data: &[Trajectory],
    idx: &[usize],
    sched: &TrainSchedule,
    stream: &str,
    seed: u64,
) -> Result<(f64, SdsGradient)> {
    let scale = 1.0 / idx.len() as f64;
    let parts = map_ordered(idx, sched.workers, |_, &i| {
        let x = &data[i];
        let noise = draw_noise(model, x.len(), sched.n_mc, &mut rng::stream(seed, &format!("{stream}/{i}")));
        let mut g = SdsGradient::zeros_like(model);
        elbo_with_noise(model, x, &noise, sched.eta, scale, Some(&mut g)).map(|e| (e.objective(), g))
    });
    let mut total = SdsGradient::zeros_like(model);
    let mut obj = 0.0;
    for p in parts {
        let (o, g) = p?;
        obj += o * scale;
        total.add_scaled(&g, 1.0);
    }
    Ok((obj, total))
}

pub(crate) fn step_sds(adam: &mut Adam, model: &mut SdsModel, grad: &SdsGradient, frozen: &dyn Fn(SdsParamGroup) -> bool) {
    let grads = grad.param_slices();
    let active: Vec<bool> = grads.iter().map(|(g, _)| !frozen(*g)).collect();
    let grads: Vec<&[f64]> = grads.into_iter().map(|(_, s)| s).collect();
    let mut params: Vec<&mut [f64]> = model.param_slices_mut().into_iter().map(|(_, s)| s).collect();
    adam.ascend(&mut params, &grads, &active);
    model.prior.apply_masks();
}

fn run_stage(
    model: &mut SdsModel,
    data: &[Trajectory],
    sched: &TrainSchedule,
    stage: &StageConfig,
    name: &str,
    seed: u64,
    frozen: &dyn Fn(SdsParamGroup) -> bool,
) -> Result<StageTrace> {
    let mut trace = StageTrace::default();
    let disabled = PlateauRule { max_decays: 0, ..PlateauRule::default() };
    let mut lr = LrController::new(stage.learning_rate, disabled, stage.step_decay);
    let mut adam = Adam::new(stage.learning_rate);
    let mut shuffle = rng::stream(seed, &format!("{name}/shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..stage.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(sched.batch_size).enumerate() {
            let (obj, grad) = batch_gradient(model, data, idx, sched, &format!("{name}/{epoch}/{b}"), seed)?;
            if !obj.is_finite() {
                return Err(Error::Diverged(format!("{name} epoch {epoch}: non-finite objective")));
            }
            sum += obj * idx.len() as f64;
            adam.learning_rate = lr.lr();
            step_sds(&mut adam, model, &grad, frozen);
        }
        let mean = sum / data.len() as f64;
        trace.epoch_objective.push(mean);
        trace.learning_rate.push(lr.lr());
        lr.observe(mean);
        log::debug!("{name} epoch {epoch}: mean objective {mean:.4}");
    }
    Ok(trace)
}

/// Gradient-trained stages after the iMSM initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Encoder, decoder and observation noise only.
    Pretrain,
    /// Everything except `pi` and `Q`.
    Warmup,
    Final,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Warmup => "warmup",
            Phase::Final => "final",
        }
    }

    pub fn freezes(self, g: SdsParamGroup) -> bool {
        match self {
            Phase::Pretrain => matches!(g, SdsParamGroup::Prior(_)),
            Phase::Warmup => g == SdsParamGroup::Prior(ParamGroup::Switch),
            Phase::Final => false,
        }
    }
}

/// Runs one stage on `model` in place, with fresh optimizer state.
pub fn train_stage(
    model: &mut SdsModel,
    data: &[Trajectory],
    sched: &TrainSchedule,
    stage: &StageConfig,
    phase: Phase,
    seed: u64,
) -> Result<StageTrace> {
    run_stage(model, data, sched, stage, phase.name(), seed, &|g| phase.freezes(g))
}

fn run_restart(model: &mut SdsModel, data: &[Trajectory], sched: &TrainSchedule, seed: u64) -> Result<SdsRestartTrace> {
    let init = stage_one(model, data, sched, seed)?;
    let mut stages = vec![StageTrace {
        epoch_objective: init.restarts[init.best_restart].epoch_log_likelihood.clone(),
        learning_rate: init.restarts[init.best_restart].learning_rate.clone(),
    }];
    stages.push(train_stage(model, data, sched, &sched.pretrain, Phase::Pretrain, seed)?);
    stages.push(train_stage(model, data, sched, &sched.warmup, Phase::Warmup, seed)?);
    stages.push(train_stage(model, data, sched, &sched.final_phase, Phase::Final, seed)?);
    Ok(SdsRestartTrace { seed, stages, init_report: Some(init), final_objective: None, diverged: None })
}

fn reinitialized(model: &SdsModel, seed: u64) -> Result<SdsModel> {
    let mut r = rng::stream(seed, "init");
    let mut out = model.clone();
    out.prior = model.prior.reinitialized(&mut r)?;
    for net in [&mut out.decoder, &mut out.encoder_mean, &mut out.encoder_logvar] {
        *net = Mlp::with_rng(net.dims(), net.activation(), &mut r)?;
    }
    let last = out.encoder_logvar.num_layers() - 1;
    out.encoder_logvar.weights_mut(last).iter_mut().for_each(|w| *w *= 0.1);
    out.encoder_logvar.biases_mut(last).iter_mut().for_each(|b| *b = (0.01f64).ln());
    Ok(out)
}

/// Trains an SDS with the four-stage schedule and keeps the restart with the
/// best final training objective. Restart 0 starts from `model`.
pub fn train_sds(model: &SdsModel, data: &[Trajectory], sched: &TrainSchedule) -> Result<SdsFitReport> {
    model.validate()?;
    sched.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for x in data {
        if x.dim() != model.obs_dim() {
            return Err(Error::shape(format!("observation dim {} != model dim {}", x.dim(), model.obs_dim())));
        }
        if x.len() <= model.prior.lag {
            return Err(Error::SequenceTooShort { len: x.len(), lag: model.prior.lag });
        }
    }
    let restarts = sched.restarts.max(1);
    let mut traces = Vec::with_capacity(restarts);
    let mut best: Option<(usize, f64, SdsModel)> = None;
    for r in 0..restarts {
        let seed = rng::derive_seed(sched.seed, &format!("sds/restart/{r}"));
        let mut candidate = if r == 0 { model.clone() } else { reinitialized(model, seed)? };
        let mut trace = match run_restart(&mut candidate, data, sched, seed) {
            Ok(t) => t,
            Err(Error::Diverged(msg)) | Err(Error::Numeric(msg)) => {
                log::warn!("sds restart {r} diverged: {msg}");
                traces.push(SdsRestartTrace { seed, stages: Vec::new(), init_report: None, final_objective: None, diverged: Some(msg) });
                continue;
            }
            Err(e) => return Err(e),
        };
        let eval_seed = rng::derive_seed(sched.seed, "sds/select");
        match mean_objective(&candidate, data, sched.n_mc, sched.eta, eval_seed, sched.workers) {
            Ok(e) => {
                let obj = e.objective();
                trace.final_objective = Some(obj);
                if best.as_ref().map_or(true, |b| obj > b.1) {
                    best = Some((r, obj, candidate));
                }
            }
            Err(e) => trace.diverged = Some(e.to_string()),
        }
        traces.push(trace);
    }
    let (best_restart, final_objective, model) =
        best.ok_or_else(|| Error::Diverged(format!("all {restarts} SDS restarts diverged")))?;
    Ok(SdsFitReport { restarts: traces, best_restart, final_objective, schedule: sched.clone(), model })
}
