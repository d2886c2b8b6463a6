//! Switching dynamical systems: an MSM prior over latents observed through a
//! noisy leaky-ReLU emission, fitted by maximizing a collapsed ELBO.

mod elbo;
mod model;
mod pca;
mod train;

pub use elbo::{draw_noise, elbo_and_gradients, elbo_estimate, elbo_with_noise, ElboEstimate};
pub use model::{reparameterized_sample, SdsArchitecture, SdsGradient, SdsModel, SdsParamGroup, MIN_ENCODER_VAR};
pub use pca::{pca_fit, Pca};
pub use train::{mean_objective, train_sds, train_stage, Phase, SdsFitReport, SdsRestartTrace, StageConfig, StageTrace, TrainSchedule};

use crate::error::Result;
use crate::graph::RegimeGraphSet;
use crate::msm::{regime_graphs, Trajectory};

/// Encodes each observation sequence to its posterior means and thresholds the
/// prior's mean absolute Jacobians per MAP regime.
pub fn extract_regime_graphs(model: &SdsModel, observations: &[Trajectory], tau: f64) -> Result<RegimeGraphSet> {
    let latents = encode_all(model, observations)?;
    regime_graphs(&model.prior, &latents, tau)
}

pub fn encode_all(model: &SdsModel, observations: &[Trajectory]) -> Result<Vec<Trajectory>> {
    observations.iter().map(|x| model.encode_trajectory(x)).collect()
}
