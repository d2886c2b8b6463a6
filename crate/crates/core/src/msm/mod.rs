//! Multi-lag Markov switching model over continuous latent trajectories.

mod brute;
mod fit;
mod graphs;
mod inference;
mod model;
mod validate;

pub use brute::{brute_force_log_likelihood, enumerate_paths, PathEnumeration, BRUTE_FORCE_PATH_LIMIT};
pub use fit::{fit_msm, FitReport, OptimizerConfig, RestartTrace};
#[allow(unused_imports)]
pub(crate) use fit::{batch_gradient, mean_log_likelihood, step_model};
pub use graphs::{mean_abs_jacobians, regime_graphs};
pub use inference::{forward_backward, log_likelihood, prior_gradient, MsmGradient, PosteriorMarginals};
#[allow(unused_imports)]
pub(crate) use inference::{accumulate_gradient, argmax, diag_gaussian_logpdf, logsumexp};
pub use model::*;
pub use validate::{validate_assumptions, AssumptionReport, AssumptionStatus, ProbeSpec, TOL_EQ, TOL_RATIO};
