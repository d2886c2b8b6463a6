//! Exact inference over the regime chain: log-space forward-backward, the
//! marginal likelihood, pairwise posteriors and the posterior-weighted
//! gradient of `log p(z_{1:T})`.

use crate::error::{Error, Result};
use crate::msm::model::{var_from_raw, CovarianceSpec, MsmModel, ParamGroup, Trajectory};
use crate::nnet::{sigmoid, MlpGradients, Trace};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn diag_gaussian_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let r = x[i] - mean[i];
        s += LN_2PI + var[i].ln() + r * r / var[i];
    }
    -0.5 * s
}

/// Regime posteriors of one trajectory.
///
/// Row `s` of `gamma` is time `M + s` (1-based), so row 0 is the initial regime
/// and has `K0` entries; later rows have `K`. `xi[s][k][j]` is
/// `p(s_{M+s+1} = k, s_{M+s} = j | z)`; `xi[0]` is `K x K0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMarginals {
    pub gamma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
}

impl PosteriorMarginals {
    /// Most probable regime for every row of `gamma`.
    pub fn map_regimes(&self) -> Vec<usize> {
        self.gamma.iter().map(|row| argmax(row)).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Log densities of the initial block and of every transition step.
pub(crate) struct Emissions {
    pub init: Vec<f64>,
    /// `(T - M) x K`
    pub steps: Vec<Vec<f64>>,
}

pub(crate) fn check_trajectory(model: &MsmModel, z: &Trajectory) -> Result<()> {
    if z.dim() != model.dim {
        return Err(Error::shape(format!("trajectory has dim {}, model expects {}", z.dim(), model.dim)));
    }
    if z.len() <= model.lag {
        return Err(Error::SequenceTooShort { len: z.len(), lag: model.lag });
    }
    Ok(())
}

pub(crate) fn emissions(model: &MsmModel, z: &Trajectory) -> Emissions {
    let (k, lag) = (model.num_regimes, model.lag);
    let head = z.head(lag);
    let init = (0..model.num_initial)
        .map(|a| diag_gaussian_logpdf(head, &model.init_means[a], &model.init_var(a)))
        .collect();
    let steps = (lag..z.len())
        .map(|t| {
            let w = z.window(t, lag);
            let x = z.row(t);
            if model.routes_to_band(&w) {
                let mean = model.shared_band.as_ref().unwrap().net.forward_unchecked(&w);
                (0..k).map(|r| diag_gaussian_logpdf(x, &mean, &model.covariance.variance(r, &mean))).collect()
            } else {
                (0..k)
                    .map(|r| {
                        let mean = model.transitions[r].base.forward_unchecked(&w);
                        diag_gaussian_logpdf(x, &mean, &model.covariance.variance(r, &mean))
                    })
                    .collect()
            }
        })
        .collect();
    Emissions { init, steps }
}

struct Messages {
    log_alpha: Vec<Vec<f64>>,
    log_beta: Vec<Vec<f64>>,
    log_likelihood: f64,
}

fn messages(model: &MsmModel, em: &Emissions) -> Result<Messages> {
    let k = model.num_regimes;
    let log_pi = model.log_pi();
    let log_q = model.log_q();
    let log_e = model.log_entry();
    let s_len = em.steps.len();
    let mut la: Vec<Vec<f64>> = Vec::with_capacity(s_len + 1);
    la.push(log_pi.iter().zip(&em.init).map(|(a, b)| a + b).collect());
    let mut buf = Vec::with_capacity(k.max(model.num_initial));
    for s in 1..=s_len {
        let trans = if s == 1 { &log_e } else { &log_q };
        let prev = &la[s - 1];
        let row: Vec<f64> = (0..k)
            .map(|j| {
                buf.clear();
                buf.extend(prev.iter().enumerate().map(|(i, &p)| p + trans[i][j]));
                em.steps[s - 1][j] + logsumexp(&buf)
            })
            .collect();
        la.push(row);
    }
    let log_likelihood = logsumexp(&la[s_len]);
    if !log_likelihood.is_finite() {
        return Err(Error::Numeric(format!("log-likelihood is {log_likelihood}")));
    }
    let mut lb: Vec<Vec<f64>> = vec![Vec::new(); s_len + 1];
    lb[s_len] = vec![0.0; k];
    for s in (0..s_len).rev() {
        let trans = if s == 0 { &log_e } else { &log_q };
        let width = if s == 0 { model.num_initial } else { k };
        let next = &lb[s + 1];
        let row = (0..width)
            .map(|i| {
                buf.clear();
                buf.extend((0..k).map(|j| trans[i][j] + em.steps[s][j] + next[j]));
                logsumexp(&buf)
            })
            .collect();
        lb[s] = row;
    }
    Ok(Messages { log_alpha: la, log_beta: lb, log_likelihood })
}

fn posteriors(model: &MsmModel, em: &Emissions, msg: &Messages) -> PosteriorMarginals {
    let k = model.num_regimes;
    let log_q = model.log_q();
    let log_e = model.log_entry();
    let gamma = msg
        .log_alpha
        .iter()
        .zip(&msg.log_beta)
        .map(|(a, b)| {
            let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
            let z = logsumexp(&v);
            v.iter().map(|x| (x - z).exp()).collect()
        })
        .collect();
    let xi = (1..msg.log_alpha.len())
        .map(|s| {
            let trans = if s == 1 { &log_e } else { &log_q };
            let prev = &msg.log_alpha[s - 1];
            (0..k)
                .map(|j| {
                    let tail = em.steps[s - 1][j] + msg.log_beta[s][j] - msg.log_likelihood;
                    prev.iter().enumerate().map(|(i, &p)| (p + trans[i][j] + tail).exp()).collect()
                })
                .collect()
        })
        .collect();
    PosteriorMarginals { gamma, xi, log_likelihood: msg.log_likelihood }
}

/// `log p(z_{1:T})`, marginalising every regime path by the forward recursion.
pub fn log_likelihood(model: &MsmModel, z: &Trajectory) -> Result<f64> {
    check_trajectory(model, z)?;
    let em = emissions(model, z);
    Ok(messages(model, &em)?.log_likelihood)
}

/// Regime marginals `gamma` and pairwise marginals `xi`.
pub fn forward_backward(model: &MsmModel, z: &Trajectory) -> Result<PosteriorMarginals> {
    check_trajectory(model, z)?;
    let em = emissions(model, z);
    let msg = messages(model, &em)?;
    Ok(posteriors(model, &em, &msg))
}

/// Gradient of `log p(z)` with the layout of an [`MsmModel`].
///
/// The shared-band network of ablation generators is fixed and carries no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MsmGradient {
    pub transitions: Vec<MlpGradients>,
    /// Flattened in `CovarianceSpec::raw_slices` order.
    pub covariance: Vec<f64>,
    pub init_means: Vec<Vec<f64>>,
    pub init_var_raw: Vec<Vec<f64>>,
    pub pi_logits: Vec<f64>,
    pub q_logits: Vec<f64>,
    pub entry_logits: Option<Vec<f64>>,
    covariance_chunk: usize,
}

impl MsmGradient {
    pub fn zeros_like(model: &MsmModel) -> Self {
        MsmGradient {
            transitions: model.transitions.iter().map(|t| MlpGradients::zeros_like(&t.base)).collect(),
            covariance: vec![0.0; model.covariance.raw_len()],
            init_means: vec![vec![0.0; model.window_dim()]; model.num_initial],
            init_var_raw: vec![vec![0.0; model.window_dim()]; model.num_initial],
            pi_logits: vec![0.0; model.num_initial],
            q_logits: vec![0.0; model.num_regimes * model.num_regimes],
            entry_logits: model.entry_logits.as_ref().map(|e| vec![0.0; e.len()]),
            covariance_chunk: model.covariance.raw_slices()[0].len(),
        }
    }

    /// Gradient blocks in the order of [`MsmModel::param_slices_mut`].
    pub fn param_slices(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out = Vec::new();
        for t in &self.transitions {
            out.extend(t.param_slices().into_iter().map(|s| (ParamGroup::Transition, s)));
        }
        out.extend(self.covariance.chunks(self.covariance_chunk).map(|s| (ParamGroup::Covariance, s)));
        out.extend(self.init_means.iter().map(|s| (ParamGroup::Initial, s.as_slice())));
        out.extend(self.init_var_raw.iter().map(|s| (ParamGroup::Initial, s.as_slice())));
        out.push((ParamGroup::Switch, self.pi_logits.as_slice()));
        out.push((ParamGroup::Switch, self.q_logits.as_slice()));
        if let Some(e) = &self.entry_logits {
            out.push((ParamGroup::Switch, e.as_slice()));
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.transitions {
            t.fill_zero();
        }
        for v in self
            .init_means
            .iter_mut()
            .chain(self.init_var_raw.iter_mut())
            .map(|v| v.as_mut_slice())
            .chain([self.covariance.as_mut_slice(), self.pi_logits.as_mut_slice(), self.q_logits.as_mut_slice()])
            .chain(self.entry_logits.iter_mut().map(|v| v.as_mut_slice()))
        {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn add_scaled(&mut self, other: &MsmGradient, s: f64) {
        for (a, b) in self.transitions.iter_mut().zip(&other.transitions) {
            a.add_scaled(b, s);
        }
        let pairs = self
            .init_means
            .iter_mut()
            .zip(&other.init_means)
            .chain(self.init_var_raw.iter_mut().zip(&other.init_var_raw));
        for (a, b) in pairs {
            crate::nnet::axpy(a, b, s);
        }
        crate::nnet::axpy(&mut self.covariance, &other.covariance, s);
        crate::nnet::axpy(&mut self.pi_logits, &other.pi_logits, s);
        crate::nnet::axpy(&mut self.q_logits, &other.q_logits, s);
        if let (Some(a), Some(b)) = (&mut self.entry_logits, &other.entry_logits) {
            crate::nnet::axpy(a, b, s);
        }
    }
}

/// Per (step, regime) cache of the forward pass needed for the backward pass.
struct StepCache {
    traces: Vec<Trace>,
    band: bool,
}

/// Adds `scale * d log p(z) / d theta` into `grad` and, when requested,
/// `scale * d log p(z) / d z` into `dz` (row-major `T x m`). Returns `log p(z)`.
pub(crate) fn accumulate_gradient(
    model: &MsmModel,
    z: &Trajectory,
    scale: f64,
    grad: &mut MsmGradient,
    mut dz: Option<&mut [f64]>,
) -> Result<f64> {
    check_trajectory(model, z)?;
    let (k, k0, lag, m) = (model.num_regimes, model.num_initial, model.lag, model.dim);
    let head = z.head(lag);

    // forward pass with traces
    let init: Vec<f64> =
        (0..k0).map(|a| diag_gaussian_logpdf(head, &model.init_means[a], &model.init_var(a))).collect();
    let mut caches = Vec::with_capacity(z.len() - lag);
    let mut steps = Vec::with_capacity(z.len() - lag);
    for t in lag..z.len() {
        let w = z.window(t, lag);
        let x = z.row(t);
        let band = model.routes_to_band(&w);
        let traces: Vec<Trace> = if band {
            let tr = model.shared_band.as_ref().unwrap().net.trace_unchecked(&w);
            vec![tr; 1]
        } else {
            (0..k).map(|r| model.transitions[r].base.trace_unchecked(&w)).collect()
        };
        let row = (0..k)
            .map(|r| {
                let mean = traces[if band { 0 } else { r }].output();
                diag_gaussian_logpdf(x, mean, &model.covariance.variance(r, mean))
            })
            .collect();
        steps.push(row);
        caches.push(StepCache { traces, band });
    }
    let em = Emissions { init, steps };
    let msg = messages(model, &em)?;
    let post = posteriors(model, &em, &msg);

    // switch parameters
    let pi = model.pi();
    for a in 0..k0 {
        grad.pi_logits[a] += scale * (post.gamma[0][a] - pi[a]);
    }
    let q = model.q();
    for (s, xi) in post.xi.iter().enumerate() {
        let (target, probs): (&mut Vec<f64>, Vec<Vec<f64>>) = match (&mut grad.entry_logits, s) {
            (Some(e), 0) => (e, model.log_entry().iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect()),
            _ => (&mut grad.q_logits, q.clone()),
        };
        let width = probs.len();
        for i in 0..width {
            let mass: f64 = (0..k).map(|j| xi[j][i]).sum();
            for j in 0..k {
                target[i * k + j] += scale * (xi[j][i] - probs[i][j] * mass);
            }
        }
    }

    // initial components
    for a in 0..k0 {
        let w = scale * post.gamma[0][a];
        if w == 0.0 {
            continue;
        }
        let var = model.init_var(a);
        for i in 0..head.len() {
            let r = head[i] - model.init_means[a][i];
            let d_mean = w * r / var[i];
            let d_var = 0.5 * w * (r * r / (var[i] * var[i]) - 1.0 / var[i]);
            grad.init_means[a][i] += d_mean;
            grad.init_var_raw[a][i] += d_var * sigmoid(model.init_var_raw[a][i]);
            if let Some(dz) = dz.as_deref_mut() {
                dz[i] -= d_mean;
            }
        }
    }

    // transitions
    let mut d_mean = vec![0.0; m];
    for (s, cache) in caches.iter().enumerate() {
        let t = lag + s;
        let x = z.row(t);
        let gam = &post.gamma[s + 1];
        for r in 0..k {
            let w = scale * gam[r];
            if w == 0.0 {
                continue;
            }
            let trace = &cache.traces[if cache.band { 0 } else { r }];
            let mean = trace.output();
            let var = model.covariance.variance(r, mean);
            let mut d_scale = 0.0;
            for i in 0..m {
                let res = x[i] - mean[i];
                d_mean[i] = w * res / var[i];
                let d_var = 0.5 * w * (res * res / (var[i] * var[i]) - 1.0 / var[i]);
                if let Some(dz) = dz.as_deref_mut() {
                    dz[t * m + i] -= d_mean[i];
                }
                match &model.covariance {
                    CovarianceSpec::Constant { raw } => grad.covariance[i] += d_var * sigmoid(raw[i]),
                    CovarianceSpec::Heterogeneous { raw } => grad.covariance[r * m + i] += d_var * sigmoid(raw[r][i]),
                    CovarianceSpec::HistoryDependent { raw_scale } => {
                        let c = var_from_raw(raw_scale[r]);
                        let sg = sigmoid(mean[i]);
                        d_scale += d_var * sg;
                        d_mean[i] += d_var * c * sg * (1.0 - sg);
                    }
                }
            }
            if let CovarianceSpec::HistoryDependent { raw_scale } = &model.covariance {
                grad.covariance[r] += d_scale * sigmoid(raw_scale[r]);
            }
            let d_in = if cache.band {
                model.shared_band.as_ref().unwrap().net.input_gradient(trace, &d_mean)
            } else {
                let net = &model.transitions[r];
                let d_in = net.base.backward_accumulate(trace, &d_mean, &mut grad.transitions[r]);
                net.mask_gradients(&mut grad.transitions[r]);
                d_in
            };
            if let Some(dz) = dz.as_deref_mut() {
                for tau in 1..=lag {
                    let row = t - tau;
                    for i in 0..m {
                        dz[row * m + i] += d_in[(tau - 1) * m + i];
                    }
                }
            }
        }
    }
    Ok(msg.log_likelihood)
}

/// `log p(z)` together with its gradient with respect to every trainable
/// parameter and to the trajectory itself (row-major `T x m`).
pub fn prior_gradient(model: &MsmModel, z: &Trajectory) -> Result<(f64, MsmGradient, Vec<f64>)> {
    let mut grad = MsmGradient::zeros_like(model);
    let mut dz = vec![0.0; z.data().len()];
    let ll = accumulate_gradient(model, z, 1.0, &mut grad, Some(&mut dz))?;
    Ok((ll, grad, dz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msm::brute::{brute_force_log_likelihood, enumerate_paths};
    use crate::msm::model::MsmArchitecture;
    use crate::nnet::{Activation, MaskedMlp, Mlp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(k: usize, lag: usize, m: usize, seed: u64) -> MsmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MsmModel::random(&MsmArchitecture::new(k, lag, m), &mut rng).unwrap()
    }

    fn traj(t: usize, m: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Trajectory::new((0..t * m).map(|_| rng.gen_range(-1.5..1.5)).collect(), m).unwrap()
    }

    #[test]
    fn single_regime_is_a_plain_product() {
        let model = small(1, 2, 2, 4);
        let z = traj(6, 2, 5);
        let mut expected = diag_gaussian_logpdf(z.head(2), &model.init_means[0], &model.init_var(0));
        for t in 2..6 {
            let (mean, var) = model.transition_moments(0, &z.window(t, 2)).unwrap();
            expected += diag_gaussian_logpdf(z.row(t), &mean, &var);
        }
        assert!((log_likelihood(&model, &z).unwrap() - expected).abs() < 1e-10);
        assert!((brute_force_log_likelihood(&model, &z).unwrap() - expected).abs() < 1e-10);
        let post = forward_backward(&model, &z).unwrap();
        assert!(post.gamma.iter().flatten().all(|&g| (g - 1.0).abs() < 1e-12));
        assert!(post.xi.iter().flatten().flatten().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn absorbing_chain_pins_regime() {
        let mut model = small(2, 1, 1, 1);
        model.set_pi(&[1.0, 0.0]);
        model.set_q(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let post = forward_backward(&model, &traj(7, 1, 2)).unwrap();
        for row in &post.gamma {
            assert!((row[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_short_sequence_rejected() {
        let model = small(2, 3, 1, 1);
        assert!(matches!(log_likelihood(&model, &traj(3, 1, 0)), Err(Error::SequenceTooShort { .. })));
    }

    #[test]
    fn brute_force_guard() {
        let model = small(3, 1, 1, 1);
        let err = brute_force_log_likelihood(&model, &traj(20, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::TooManyPaths { .. }));
    }

    #[test]
    fn path_weights_sum_to_one() {
        let mut model = small(3, 1, 1, 9);
        model.num_initial = 2;
        model.pi_logits = vec![0.3, -0.2];
        model.init_means.truncate(2);
        model.init_var_raw.truncate(2);
        model.entry_logits = Some(vec![0.1, 0.5, -1.0, 2.0, 0.0, 0.3]);
        model.validate().unwrap();
        let e = enumerate_paths(&model, &traj(4, 1, 3)).unwrap();
        assert_eq!(e.num_paths, 2 * 27);
        assert!((e.total_path_weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dead_regime_gets_no_transition_gradient() {
        let mut model = small(2, 1, 2, 11);
        model.set_pi(&[1.0, 0.0]);
        model.set_q(&[vec![1.0, 0.0], vec![0.5, 0.5]]);
        let (_, g, _) = prior_gradient(&model, &traj(6, 2, 1)).unwrap();
        assert!(g.transitions[1].d_weights.iter().flatten().all(|&v| v == 0.0));
        assert!(g.transitions[0].d_weights.iter().flatten().any(|&v| v != 0.0));
    }

    #[test]
    fn single_regime_switch_gradient_vanishes() {
        let model = small(1, 1, 2, 2);
        let (_, g, _) = prior_gradient(&model, &traj(5, 2, 1)).unwrap();
        assert!(g.pi_logits.iter().chain(&g.q_logits).all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn band_routes_all_regimes_to_shared_net() {
        let mut model = small(2, 1, 2, 3);
        let net = Mlp::new(&[2, 4, 2], Activation::Cosine, 5).unwrap();
        model.shared_band = Some(crate::msm::model::SharedBand { net: net.clone(), lo: 3.0, hi: 5.0 });
        let w = [4.0, 0.0];
        let a = model.transition_mean(0, &w).unwrap();
        let b = model.transition_mean(1, &w).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.forward(&w).unwrap());
        let far = [10.0, 0.0];
        assert_ne!(model.transition_mean(0, &far).unwrap(), model.transition_mean(1, &far).unwrap());
        let _ = MaskedMlp::dense(net);
    }
}
