//! Sampling checks of the conditions under which an MSM is identifiable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::msm::model::MsmModel;

pub const TOL_EQ: f64 = 1e-6;
pub const TOL_RATIO: f64 = 1e-4;
/// Largest tolerated fraction of probe points where two regimes coincide.
pub const M1_FAIL_FRACTION: f64 = 1e-3;
/// Probe count below which a passing m1 check is only reported as a warning.
pub const M1_MIN_PROBES: usize = 10_000;

/// Probe windows are drawn from `N(0, scale^2 I)` over `R^{mM}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub num_samples: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec { num_samples: M1_MIN_PROBES, scale: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AssumptionStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub num_probes: usize,
    /// Fraction of probes where some regime pair shares mean and covariance.
    pub m1_intersection_fraction: f64,
    pub m1: AssumptionStatus,
    /// Every transition network uses an analytic activation.
    pub m2: AssumptionStatus,
    /// Fraction of probes where some regime pair has pairwise distinct variance ratios.
    pub s2_satisfied_fraction: f64,
    pub s2: AssumptionStatus,
    /// Largest output change caused by perturbing an input the mask disconnects.
    pub m3_max_deviation: Option<f64>,
    pub m3: Option<AssumptionStatus>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.m1 != AssumptionStatus::Fail
            && self.m2 != AssumptionStatus::Fail
            && self.m3 != Some(AssumptionStatus::Fail)
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ratios_distinct(a: &[f64], b: &[f64]) -> bool {
    let r: Vec<f64> = a.iter().zip(b).map(|(x, y)| x / y).collect();
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            if (r[i] - r[j]).abs() <= TOL_RATIO {
                return false;
            }
        }
    }
    true
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn validate_assumptions(model: &MsmModel, probe: &ProbeSpec) -> AssumptionReport {
    let k = model.num_regimes;
    let d = model.window_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut intersect = 0usize;
    let mut distinct = 0usize;
    let mut m3_dev: f64 = 0.0;
    let masked = model.transitions.iter().any(|t| t.is_masked());
    let deps: Vec<Vec<Vec<bool>>> = model.transitions.iter().map(|t| t.dependency()).collect();
    for _ in 0..probe.num_samples {
        let w: Vec<f64> = (0..d).map(|_| probe.scale * gauss(&mut rng)).collect();
        let moments: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
            .map(|r| {
                let mean = model.transition_mean_unchecked(r, &w);
                let var = model.covariance.variance(r, &mean);
                (mean, var)
            })
            .collect();
        let mut hit = false;
        let mut ok = false;
        for i in 0..k {
            for j in i + 1..k {
                let (mi, vi) = &moments[i];
                let (mj, vj) = &moments[j];
                if max_abs_diff(mi, mj) <= TOL_EQ && max_abs_diff(vi, vj) <= TOL_EQ {
                    hit = true;
                }
                if ratios_distinct(vi, vj) {
                    ok = true;
                }
            }
        }
        intersect += hit as usize;
        distinct += ok as usize;
        if masked {
            for (r, net) in model.transitions.iter().enumerate() {
                if !net.is_masked() {
                    continue;
                }
                let base = net.base.forward_unchecked(&w);
                for col in 0..d {
                    if deps[r].iter().all(|row| row[col]) {
                        continue;
                    }
                    let mut moved = w.clone();
                    moved[col] += 1.0 + probe.scale * gauss(&mut rng);
                    let out = net.base.forward_unchecked(&moved);
                    for (o, row) in deps[r].iter().enumerate() {
                        if !row[col] {
                            m3_dev = m3_dev.max((out[o] - base[o]).abs());
                        }
                    }
                }
            }
        }
    }
    let n = probe.num_samples.max(1) as f64;
    let m1_fraction = intersect as f64 / n;
    let m1 = if m1_fraction > M1_FAIL_FRACTION {
        AssumptionStatus::Fail
    } else if probe.num_samples < M1_MIN_PROBES {
        AssumptionStatus::Warn
    } else {
        AssumptionStatus::Pass
    };
    let m2 = if model.transitions.iter().all(|t| t.base.activation().is_analytic()) {
        AssumptionStatus::Pass
    } else {
        AssumptionStatus::Fail
    };
    let s2_fraction = if k < 2 { 0.0 } else { distinct as f64 / n };
    let s2 = if s2_fraction >= 1.0 { AssumptionStatus::Pass } else { AssumptionStatus::Warn };
    let (m3_max_deviation, m3) = if masked {
        let status = if m3_dev == 0.0 { AssumptionStatus::Pass } else { AssumptionStatus::Fail };
        (Some(m3_dev), Some(status))
    } else {
        (None, None)
    };
    AssumptionReport {
        num_probes: probe.num_samples,
        m1_intersection_fraction: m1_fraction,
        m1,
        m2,
        s2_satisfied_fraction: s2_fraction,
        s2,
        m3_max_deviation,
        m3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msm::model::{CovarianceSpec, MsmArchitecture};

    fn model(k: usize) -> MsmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        MsmModel::random(&MsmArchitecture::new(k, 1, 2), &mut rng).unwrap()
    }

    #[test]
    fn duplicated_regime_fails_m1() {
        let mut m = model(2);
        m.transitions[1] = m.transitions[0].clone();
        m.covariance = CovarianceSpec::constant(&[0.1, 0.1]);
        let rep = validate_assumptions(&m, &ProbeSpec { num_samples: 500, ..Default::default() });
        assert_eq!(rep.m1_intersection_fraction, 1.0);
        assert_eq!(rep.m1, AssumptionStatus::Fail);
        assert!(!rep.passed());
    }

    #[test]
    fn distinct_regimes_pass_m1() {
        let rep = validate_assumptions(&model(3), &ProbeSpec::default());
        assert_eq!(rep.m1_intersection_fraction, 0.0);
        assert_eq!(rep.m1, AssumptionStatus::Pass);
        assert_eq!(rep.m2, AssumptionStatus::Pass);
        assert!(rep.m3.is_none());
    }

    #[test]
    fn constant_noise_never_satisfies_s2() {
        let mut m = model(3);
        m.covariance = CovarianceSpec::constant(&[0.1, 0.2]);
        let rep = validate_assumptions(&m, &ProbeSpec { num_samples: 200, ..Default::default() });
        assert_eq!(rep.s2_satisfied_fraction, 0.0);
        assert_eq!(rep.s2, AssumptionStatus::Warn);
    }

    #[test]
    fn distinct_heterogeneous_ratios_satisfy_s2() {
        let mut m = model(2);
        m.covariance = CovarianceSpec::heterogeneous(&[vec![0.01, 0.05], vec![0.03, 0.02]]);
        let rep = validate_assumptions(&m, &ProbeSpec { num_samples: 200, ..Default::default() });
        assert_eq!(rep.s2_satisfied_fraction, 1.0);
    }
}
