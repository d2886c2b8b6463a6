use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::{accumulate_gradient, log_likelihood, Trajectory};
use crate::nnet::{sigmoid, Trace};
use crate::sds::model::{encoder_var, encoder_var_derivative, SdsGradient, SdsModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Monte-Carlo ELBO of one sequence, averaged over `n_mc` samples.
///
/// `elbo = recon_term + entropy_term + prior_term`, where `entropy_term` is
/// `-log q(z~ | x)`. The training objective adds `reg_term`, which is
/// `-eta` times the summed elementwise l1 norm of every regime's transition
/// Jacobian over all windows of the sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub recon_term: f64,
    pub entropy_term: f64,
    pub prior_term: f64,
    pub reg_term: f64,
    pub n_mc: usize,
}

impl ElboEstimate {
    pub fn objective(&self) -> f64 {
        self.elbo + self.reg_term
    }
}

fn check(model: &SdsModel, x: &Trajectory) -> Result<()> {
    if x.dim() != model.obs_dim() {
        return Err(Error::shape(format!("observation dim {} != model dim {}", x.dim(), model.obs_dim())));
    }
    if x.len() <= model.prior.lag {
        return Err(Error::SequenceTooShort { len: x.len(), lag: model.prior.lag });
    }
    Ok(())
}

/// Standard-normal noise for `n_mc` samples of a length-`t` sequence.
pub fn draw_noise<R: Rng + ?Sized>(model: &SdsModel, t: usize, n_mc: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let m = model.latent_dim();
    (0..n_mc).map(|_| (0..t * m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

/// ELBO and the gradient of the objective (`elbo + reg_term`) for fixed
/// reparameterization noise. The gradient is added into `grad` scaled by `scale`.
pub fn elbo_with_noise(
    model: &SdsModel,
    x: &Trajectory,
    noise: &[Vec<f64>],
    eta: f64,
    scale: f64,
    mut grad: Option<&mut SdsGradient>,
) -> Result<ElboEstimate> {
    check(model, x)?;
    if noise.is_empty() {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    if eta < 0.0 {
        return Err(Error::Config("eta must be non-negative".into()));
    }
    let (t_len, m, n, lag) = (x.len(), model.latent_dim(), model.obs_dim(), model.prior.lag);
    let n_mc = noise.len();
    let s = scale / n_mc as f64;
    let obs_var = model.obs_noise_diag();
    let mut est = ElboEstimate { elbo: 0.0, recon_term: 0.0, entropy_term: 0.0, prior_term: 0.0, reg_term: 0.0, n_mc };

    let enc: Vec<(Trace, Trace)> = (0..t_len)
        .map(|t| (model.encoder_mean.trace_unchecked(x.row(t)), model.encoder_logvar.trace_unchecked(x.row(t))))
        .collect();
    for eps in noise {
        if eps.len() != t_len * m {
            return Err(Error::shape(format!("noise must have {} entries", t_len * m)));
        }
        let mut z = vec![0.0; t_len * m];
        let mut entropy = 0.0;
        for t in 0..t_len {
            let (mean, lv) = (enc[t].0.output(), enc[t].1.output());
            for i in 0..m {
                let v = encoder_var(lv[i]);
                let e = eps[t * m + i];
                z[t * m + i] = mean[i] + v.sqrt() * e;
                entropy += 0.5 * (LN_2PI + v.ln() + e * e);
            }
        }
        let zt = Trajectory::new(z, m)?;

        let mut dz = vec![0.0; t_len * m];
        let prior = match grad.as_deref_mut() {
            Some(g) => accumulate_gradient(&model.prior, &zt, s, &mut g.prior, Some(&mut dz))?,
            None => log_likelihood(&model.prior, &zt)?,
        };

        let mut penalty = 0.0;
        if eta > 0.0 {
            for t in lag..t_len {
                let w = zt.window(t, lag);
                for (k, net) in model.prior.transitions.iter().enumerate() {
                    match grad.as_deref_mut() {
                        Some(g) => {
                            let (p, dw) = net.base.jacobian_l1_accumulate(&w, -eta * s, &mut g.prior.transitions[k]);
                            penalty += p;
                            for tau in 1..=lag {
                                let row = t - tau;
                                for i in 0..m {
                                    dz[row * m + i] += dw[(tau - 1) * m + i];
                                }
                            }
                        }
                        None => penalty += net.base.jacobian_l1(&w)?,
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (net, gk) in model.prior.transitions.iter().zip(g.prior.transitions.iter_mut()) {
                    net.mask_gradients(gk);
                }
            }
        }

        let mut recon = 0.0;
        let mut d_var = vec![0.0; n];
        for t in 0..t_len {
            let tr = model.decoder.trace_unchecked(zt.row(t));
            let f = tr.output();
            let xt = x.row(t);
            let mut up = vec![0.0; n];
            for j in 0..n {
                let r = xt[j] - f[j];
                recon -= 0.5 * (LN_2PI + obs_var[j].ln() + r * r / obs_var[j]);
                up[j] = s * r / obs_var[j];
                d_var[j] += 0.5 * (r * r / (obs_var[j] * obs_var[j]) - 1.0 / obs_var[j]);
            }
            if let Some(g) = grad.as_deref_mut() {
                let dzt = model.decoder.backward_accumulate(&tr, &up, &mut g.decoder);
                for i in 0..m {
                    dz[t * m + i] += dzt[i];
                }
            }
        }

        if let Some(g) = grad.as_deref_mut() {
            for j in 0..n {
                g.obs_noise_raw[j] += s * d_var[j] * sigmoid(model.obs_noise_raw[j]);
            }
            let mut d_lv = vec![0.0; m];
            for t in 0..t_len {
                let lv = enc[t].1.output();
                for i in 0..m {
                    let v = encoder_var(lv[i]);
                    let dv = encoder_var_derivative(lv[i]);
                    d_lv[i] = dz[t * m + i] * eps[t * m + i] * 0.5 / v.sqrt() * dv + s * 0.5 * dv / v;
                }
                model.encoder_mean.backward_accumulate(&enc[t].0, &dz[t * m..(t + 1) * m], &mut g.encoder_mean);
                model.encoder_logvar.backward_accumulate(&enc[t].1, &d_lv, &mut g.encoder_logvar);
            }
        }

        est.recon_term += recon / n_mc as f64;
        est.entropy_term += entropy / n_mc as f64;
        est.prior_term += prior / n_mc as f64;
        est.reg_term -= eta * penalty / n_mc as f64;
    }
    est.elbo = est.recon_term + est.entropy_term + est.prior_term;
    if !est.objective().is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite ELBO (recon {}, entropy {}, prior {}, reg {})",
            est.recon_term, est.entropy_term, est.prior_term, est.reg_term
        )));
    }
    Ok(est)
}

/// Draws `n_mc` reparameterized samples from `rng` and returns the estimate
/// together with the gradient of the objective.
pub fn elbo_and_gradients<R: Rng + ?Sized>(
    model: &SdsModel,
    x: &Trajectory,
    n_mc: usize,
    eta: f64,
    rng: &mut R,
) -> Result<(ElboEstimate, SdsGradient)> {
    check(model, x)?;
    let noise = draw_noise(model, x.len(), n_mc, rng);
    let mut grad = SdsGradient::zeros_like(model);
    let est = elbo_with_noise(model, x, &noise, eta, 1.0, Some(&mut grad))?;
    Ok((est, grad))
}

/// ELBO estimate without gradients.
pub fn elbo_estimate<R: Rng + ?Sized>(
    model: &SdsModel,
    x: &Trajectory,
    n_mc: usize,
    eta: f64,
    rng: &mut R,
) -> Result<ElboEstimate> {
    check(model, x)?;
    let noise = draw_noise(model, x.len(), n_mc, rng);
    elbo_with_noise(model, x, &noise, eta, 1.0, None)
}
