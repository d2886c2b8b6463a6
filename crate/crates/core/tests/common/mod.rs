//! Oracles shared by the SDS property tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switching_core::msm::{
    log_likelihood, prior_gradient, CovarianceKind, CovarianceSpec, MsmArchitecture, MsmModel, Trajectory,
};
use switching_core::nnet::Activation;
use switching_core::sds::{elbo_with_noise, SdsArchitecture, SdsGradient, SdsModel};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn kind_of(i: usize) -> CovarianceKind {
    [CovarianceKind::Constant, CovarianceKind::Heterogeneous, CovarianceKind::HistoryDependent][i % 3]
}

/// Small SDS with spread-out switch and noise parameters.
pub fn small_sds(seed: u64, k: usize, lag: usize, m: usize, n: usize, hidden: usize, kind: CovarianceKind) -> SdsModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prior = MsmArchitecture::new(k, lag, m).with_covariance(kind);
    prior.hidden = vec![hidden];
    let arch = SdsArchitecture { encoder_hidden: vec![hidden], decoder_hidden: vec![hidden], ..SdsArchitecture::new(prior, n) };
    let mut model = SdsModel::random(&arch, &mut rng).unwrap();
    let p = &mut model.prior;
    for v in p.pi_logits.iter_mut().chain(p.q_logits.iter_mut()) {
        *v = rng.gen_range(-1.5..1.5);
    }
    for v in p.covariance.raw_slices_mut().into_iter().flatten() {
        *v = rng.gen_range(-2.0..0.0);
    }
    for v in model.obs_noise_raw.iter_mut() {
        *v = rng.gen_range(-1.5..0.0);
    }
    let last = model.encoder_logvar.num_layers() - 1;
    for b in model.encoder_logvar.biases_mut(last) {
        *b = rng.gen_range(-2.5..-0.5);
    }
    model
}

pub fn random_obs(seed: u64, t: usize, n: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5D5);
    Trajectory::new((0..t * n).map(|_| rng.gen_range(-1.5..1.5)).collect(), n).unwrap()
}

/// Worst elementwise relative error (floor 1e-3) between the analytic
/// frozen-noise gradient and central differences, per parameter block.
pub fn sds_fd_errors(model: &SdsModel, x: &Trajectory, noise: &[Vec<f64>], eta: f64, h: f64) -> Vec<f64> {
    let mut grad = SdsGradient::zeros_like(model);
    elbo_with_noise(model, x, noise, eta, 1.0, Some(&mut grad)).unwrap();
    let analytic: Vec<Vec<f64>> = grad.param_slices().into_iter().map(|(_, s)| s.to_vec()).collect();
    let mut work = model.clone();
    let objective = |m: &SdsModel| elbo_with_noise(m, x, noise, eta, 1.0, None).unwrap().objective();
    let mut worst = vec![0.0f64; analytic.len()];
    for (b, block) in analytic.iter().enumerate() {
        for j in 0..block.len() {
            let orig = work.param_slices_mut()[b].1[j];
            work.param_slices_mut()[b].1[j] = orig + h;
            let up = objective(&work);
            work.param_slices_mut()[b].1[j] = orig - h;
            let down = objective(&work);
            work.param_slices_mut()[b].1[j] = orig;
            let fd = (up - down) / (2.0 * h);
            worst[b] = worst[b].max(rel_err(block[j], fd));
        }
    }
    worst
}

fn gauss_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// `log p(x_{1:T})` of a lag-1, one-dimensional SDS by summing the joint
/// density over regime paths and a uniform latent grid on `[-half, half]`.
pub fn quadrature_log_evidence(model: &SdsModel, x: &Trajectory, half: f64, points: usize) -> f64 {
    let p = &model.prior;
    assert!(p.dim == 1 && p.lag == 1 && x.dim() == 1 && p.num_initial == p.num_regimes);
    let k = p.num_regimes;
    let dz = 2.0 * half / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| -half + i as f64 * dz).collect();
    let obs_var = model.obs_noise_diag()[0];
    let lik = |t: usize| -> Vec<f64> {
        grid.iter().map(|&z| gauss_pdf(x.row(t)[0], model.decode(&[z]).unwrap()[0], obs_var)).collect()
    };
    let pi = p.pi();
    let q = p.q();
    let mut alpha: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            let v0 = p.init_var(a)[0];
            let l = lik(0);
            grid.iter().zip(&l).map(|(&z, li)| pi[a] * gauss_pdf(z, p.init_means[a][0], v0) * li).collect()
        })
        .collect();
    let moments: Vec<Vec<(f64, f64)>> = (0..k)
        .map(|r| {
            grid.iter()
                .map(|&zp| {
                    let (mean, var) = p.transition_moments(r, &[zp]).unwrap();
                    (mean[0], var[0])
                })
                .collect()
        })
        .collect();
    let mut log_norm = 0.0;
    for t in 1..x.len() {
        let l = lik(t);
        let mut next = vec![vec![0.0; points]; k];
        for r in 0..k {
            // mass flowing into regime r from every previous state
            let w: Vec<f64> = (0..points).map(|i| (0..k).map(|j| alpha[j][i] * q[j][r]).sum::<f64>() * dz).collect();
            for (zi, &z) in grid.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..points {
                    if w[i] != 0.0 {
                        let (mean, var) = moments[r][i];
                        acc += w[i] * gauss_pdf(z, mean, var);
                    }
                }
                next[r][zi] = acc * l[zi];
            }
        }
        let total: f64 = next.iter().flatten().sum::<f64>() * dz;
        log_norm += total.ln();
        next.iter_mut().flatten().for_each(|v| *v /= total);
        alpha = next;
    }
    let last: f64 = alpha.iter().flatten().sum::<f64>() * dz;
    log_norm + last.ln()
}

/// One-dimensional instance whose variances keep the quadrature accurate.
pub fn quadrature_instance(seed: u64) -> SdsModel {
    let mut model = small_sds(seed, 2, 1, 1, 1, 4, CovarianceKind::Heterogeneous);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
    model.prior.covariance = switching_core::msm::CovarianceSpec::heterogeneous(&[
        vec![rng.gen_range(0.1..0.4)],
        vec![rng.gen_range(0.1..0.4)],
    ]);
    for a in 0..2 {
        model.prior.set_init_var(a, &[rng.gen_range(0.2..0.6)]);
    }
    model.set_obs_noise_diag(&[rng.gen_range(0.1..0.3)]);
    assert!(matches!(model.decoder.activation(), Activation::LeakyRelu(_)));
    model
}

pub fn random_model(seed: u64, k: usize, k0: usize, lag: usize, m: usize, kind: CovarianceKind) -> MsmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arch = MsmArchitecture::new(k, lag, m).with_covariance(kind);
    arch.num_initial = k0;
    arch.hidden = vec![5];
    let mut model = MsmModel::random(&arch, &mut rng).unwrap();
    // spread the switch parameters and variances so posteriors are not uniform
    for v in model.pi_logits.iter_mut().chain(model.q_logits.iter_mut()).chain(model.entry_logits.iter_mut().flatten()) {
        *v = rng.gen_range(-1.5..1.5);
    }
    for v in model.covariance.raw_slices_mut().into_iter().flatten() {
        *v = rng.gen_range(-2.5..0.0);
    }
    for v in model.init_var_raw.iter_mut().flatten() {
        *v = rng.gen_range(-1.0..1.0);
    }
    model
}

pub fn random_traj(seed: u64, t: usize, m: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    Trajectory::new((0..t * m).map(|_| rng.gen_range(-1.2..1.2)).collect(), m).unwrap()
}

/// Pushes the model through `z -> A z + b` with `A = D P`, `(A z)_i = d_i z_{p(i)}`.
pub fn pushforward(model: &MsmModel, d: &[f64], p: &[usize], b: &[f64]) -> MsmModel {
    let m = model.dim;
    let lag = model.lag;
    let dm = m * lag;
    // block-diagonal A over the window, and its inverse
    let blk = |i: usize| (i / m, i % m);
    let mut out = model.clone();
    for net in &mut out.transitions {
        let w0 = net.base.weights(0).to_vec();
        let b0 = net.base.biases(0).to_vec();
        let hidden = b0.len();
        // x = A_blk^{-1}(x' - b_rep): x_{l, p(i)} = (x'_{l, i} - b_i) / d_i
        let mut w0n = vec![0.0; hidden * dm];
        let mut b0n = b0.clone();
        for hrow in 0..hidden {
            for col in 0..dm {
                let (l, i) = blk(col);
                let src = l * m + p[i];
                w0n[hrow * dm + col] = w0[hrow * dm + src] / d[i];
                b0n[hrow] -= w0[hrow * dm + src] * b[i] / d[i];
            }
        }
        net.base.weights_mut(0).copy_from_slice(&w0n);
        net.base.biases_mut(0).copy_from_slice(&b0n);
        let last = net.base.num_layers() - 1;
        let wl = net.base.weights(last).to_vec();
        let bl = net.base.biases(last).to_vec();
        let width = wl.len() / m;
        let mut wln = vec![0.0; wl.len()];
        let mut bln = vec![0.0; m];
        for i in 0..m {
            for c in 0..width {
                wln[i * width + c] = d[i] * wl[p[i] * width + c];
            }
            bln[i] = d[i] * bl[p[i]] + b[i];
        }
        net.base.weights_mut(last).copy_from_slice(&wln);
        net.base.biases_mut(last).copy_from_slice(&bln);
    }
    let map_var = |v: &[f64]| -> Vec<f64> { (0..m).map(|i| d[i] * d[i] * v[p[i]]).collect() };
    out.covariance = match &model.covariance {
        CovarianceSpec::Constant { .. } => CovarianceSpec::constant(&map_var(&model.covariance.variance(0, &[]))),
        CovarianceSpec::Heterogeneous { raw } => CovarianceSpec::heterogeneous(
            &(0..raw.len()).map(|k| map_var(&model.covariance.variance(k, &[]))).collect::<Vec<_>>(),
        ),
        CovarianceSpec::HistoryDependent { .. } => panic!("not closed under affine maps"),
    };
    for a in 0..model.num_initial {
        let mu = &model.init_means[a];
        let var = model.init_var(a);
        let mut mu2 = vec![0.0; dm];
        let mut var2 = vec![0.0; dm];
        for col in 0..dm {
            let (l, i) = blk(col);
            mu2[col] = d[i] * mu[l * m + p[i]] + b[i];
            var2[col] = d[i] * d[i] * var[l * m + p[i]];
        }
        out.init_means[a] = mu2;
        out.set_init_var(a, &var2);
    }
    out
}

/// Worst relative error of the analytic prior gradient against central
/// differences, as `(parameters, inputs)`.
pub fn msm_fd_errors(model: &MsmModel, z: &Trajectory, h: f64) -> (f64, f64) {
    let mut model = model.clone();
    let (ll, grad, dz) = prior_gradient(&model, z).unwrap();
    assert!((ll - log_likelihood(&model, z).unwrap()).abs() < 1e-12);
    let analytic: Vec<f64> = grad.param_slices().into_iter().flat_map(|(_, s)| s.to_vec()).collect();
    let shape: Vec<usize> = model.param_slices_mut().iter().map(|(_, s)| s.len()).collect();
    let (mut worst_p, mut worst_z) = (0.0f64, 0.0f64);
    let mut idx = 0;
    for (b, len) in shape.into_iter().enumerate() {
        for j in 0..len {
            let orig = model.param_slices_mut()[b].1[j];
            model.param_slices_mut()[b].1[j] = orig + h;
            let up = log_likelihood(&model, z).unwrap();
            model.param_slices_mut()[b].1[j] = orig - h;
            let down = log_likelihood(&model, z).unwrap();
            model.param_slices_mut()[b].1[j] = orig;
            worst_p = worst_p.max(rel_err(analytic[idx], (up - down) / (2.0 * h)));
            idx += 1;
        }
    }
    let m = z.dim();
    let rows: Vec<Vec<f64>> = (0..z.len()).map(|t| z.row(t).to_vec()).collect();
    for t in 0..z.len() {
        for i in 0..m {
            let mut p = rows.clone();
            p[t][i] += h;
            let mut q = rows.clone();
            q[t][i] -= h;
            let fd = (log_likelihood(&model, &Trajectory::from_rows(&p).unwrap()).unwrap()
                - log_likelihood(&model, &Trajectory::from_rows(&q).unwrap()).unwrap())
                / (2.0 * h);
            worst_z = worst_z.max(rel_err(dz[t * m + i], fd));
        }
    }
    (worst_p, worst_z)
}
pub mod metric_cases;
