//! Regime-dependent causal graphs read off transition Jacobians.

use crate::error::{Error, Result};
use crate::graph::RegimeGraphSet;
use crate::msm::inference::forward_backward;
use crate::msm::model::{MsmModel, Trajectory};

/// Mean absolute Jacobian of each regime's transition mean over the windows
/// whose MAP regime is that regime. `None` for regimes no window is assigned to.
pub fn mean_abs_jacobians(model: &MsmModel, latents: &[Trajectory]) -> Result<Vec<Option<Vec<Vec<f64>>>>> {
    let (k, m, d) = (model.num_regimes, model.dim, model.window_dim());
    let mut sums = vec![vec![vec![0.0; d]; m]; k];
    let mut counts = vec![0usize; k];
    for z in latents {
        let post = forward_backward(model, z)?;
        let map = post.map_regimes();
        for t in model.lag..z.len() {
            let r = map[t - model.lag + 1];
            let jac = model.transition_jacobian(r, &z.window(t, model.lag))?;
            for (s, row) in sums[r].iter_mut().zip(&jac) {
                for (a, b) in s.iter_mut().zip(row) {
                    *a += b.abs();
                }
            }
            counts[r] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|row| row.into_iter().map(|v| v / c as f64).collect()).collect()))
        .collect())
}

/// Edge wherever the mean absolute Jacobian exceeds `tau`.
pub fn regime_graphs(model: &MsmModel, latents: &[Trajectory], tau: f64) -> Result<RegimeGraphSet> {
    if tau.is_nan() {
        return Err(Error::Config("tau must be a number".into()));
    }
    let jac = mean_abs_jacobians(model, latents)?;
    let graphs = jac
        .into_iter()
        .map(|j| j.map(|rows| rows.into_iter().map(|row| row.into_iter().map(|v| v > tau).collect()).collect()))
        .collect();
    RegimeGraphSet::new(model.dim, model.lag, graphs)
}
