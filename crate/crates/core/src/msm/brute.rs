//! Explicit enumeration of every regime path. Exponential in `T`; a test oracle.

use crate::error::{Error, Result};
use crate::msm::inference::{check_trajectory, emissions, logsumexp};
use crate::msm::model::{MsmModel, Trajectory};

/// Upper bound on the number of regime paths [`brute_force_log_likelihood`] will enumerate.
pub const BRUTE_FORCE_PATH_LIMIT: u128 = 1_000_000;

/// Result of enumerating every regime path explicitly.
#[derive(Debug, Clone)]
pub struct PathEnumeration {
    pub log_likelihood: f64,
    /// Posterior regime marginals in the layout of [`PosteriorMarginals::gamma`].
    pub gamma: Vec<Vec<f64>>,
    /// Same layout as [`PosteriorMarginals::xi`].
    pub xi: Vec<Vec<Vec<f64>>>,
    /// Sum of the prior path weights; 1 up to rounding.
    pub total_path_weight: f64,
    pub num_paths: u128,
}

/// Exact log-likelihood as a mixture over all `K0 * K^(T-M)` regime paths.
/// Intended as a test oracle for small instances.
pub fn brute_force_log_likelihood(model: &MsmModel, z: &Trajectory) -> Result<f64> {
    Ok(enumerate_paths(model, z)?.log_likelihood)
}

pub fn enumerate_paths(model: &MsmModel, z: &Trajectory) -> Result<PathEnumeration> {
    check_trajectory(model, z)?;
    let (k, k0) = (model.num_regimes, model.num_initial);
    let steps = z.len() - model.lag;
    let num_paths = (k0 as u128).saturating_mul((k as u128).saturating_pow(steps as u32));
    if num_paths > BRUTE_FORCE_PATH_LIMIT {
        return Err(Error::TooManyPaths { paths: num_paths, limit: BRUTE_FORCE_PATH_LIMIT });
    }
    let em = emissions(model, z);
    let pi = model.pi();
    let q = model.q();
    let entry: Vec<Vec<f64>> = model.log_entry().iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();

    let mut path = vec![0usize; steps + 1];
    let mut log_joint = Vec::with_capacity(num_paths as usize);
    let mut paths = Vec::with_capacity(num_paths as usize);
    let mut total_weight = 0.0;
    for idx in 0..num_paths {
        let mut rest = idx;
        path[0] = (rest % k0 as u128) as usize;
        rest /= k0 as u128;
        for p in path.iter_mut().skip(1) {
            *p = (rest % k as u128) as usize;
            rest /= k as u128;
        }
        let mut weight = pi[path[0]];
        for s in 1..=steps {
            weight *= if s == 1 { entry[path[0]][path[1]] } else { q[path[s - 1]][path[s]] };
        }
        total_weight += weight;
        let mut density = em.init[path[0]];
        for s in 1..=steps {
            density += em.steps[s - 1][path[s]];
        }
        log_joint.push(weight.ln() + density);
        paths.push(path.clone());
    }
    let ll = logsumexp(&log_joint);
    let mut gamma: Vec<Vec<f64>> = (0..=steps).map(|s| vec![0.0; if s == 0 { k0 } else { k }]).collect();
    let mut xi: Vec<Vec<Vec<f64>>> =
        (1..=steps).map(|s| vec![vec![0.0; if s == 1 { k0 } else { k }]; k]).collect();
    for (p, lj) in paths.iter().zip(&log_joint) {
        let w = (lj - ll).exp();
        for s in 0..=steps {
            gamma[s][p[s]] += w;
        }
        for s in 1..=steps {
            xi[s - 1][p[s]][p[s - 1]] += w;
        }
    }
    Ok(PathEnumeration { log_likelihood: ll, gamma, xi, total_path_weight: total_weight, num_paths })
}
