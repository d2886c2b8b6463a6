//! Sweeps over the number of regimes `K` and the lag `M`, scored on held-out
//! data, and elbow detection on the resulting curves.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::{fit_msm, log_likelihood, MsmArchitecture, MsmModel, OptimizerConfig, Trajectory};
use crate::parallel::map_ordered;
use crate::rng;
use crate::sds::{mean_objective, train_sds, SdsArchitecture, SdsModel, TrainSchedule};

/// Default relative-gain threshold of [`elbow_select`].
pub const ELBOW_RHO: f64 = 0.05;

/// Model family and training settings used for every cell. The `K` and `M`
/// of the architecture are overridden per cell; the seed per cell and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum Trainer {
    /// Scored by mean held-out log-likelihood.
    Msm { arch: MsmArchitecture, optimizer: OptimizerConfig },
    /// Scored by mean held-out ELBO.
    Sds { arch: SdsArchitecture, schedule: TrainSchedule },
}

/// The `(K, M)` pairs to train, each once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    pub fn product(k_values: &[usize], m_values: &[usize], seeds: &[u64]) -> Self {
        let cells = k_values.iter().flat_map(|&k| m_values.iter().map(move |&m| (k, m))).collect();
        GridSpec { cells, seeds: seeds.to_vec() }
    }

    /// `K` varied at lag `m0` plus `M` varied at `k0`, sharing the `(k0, m0)` cell.
    pub fn cross(k_values: &[usize], m0: usize, m_values: &[usize], k0: usize, seeds: &[u64]) -> Self {
        let mut cells: Vec<(usize, usize)> = k_values.iter().map(|&k| (k, m0)).collect();
        cells.extend(m_values.iter().map(|&m| (k0, m)).filter(|c| !cells.contains(c)).collect::<Vec<_>>());
        GridSpec { cells, seeds: seeds.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCell {
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    /// `None` when training failed or the score was not finite.
    pub objective: Option<f64>,
    pub runtime_secs: f64,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub k_values: Vec<usize>,
    pub m_values: Vec<usize>,
    pub cells: Vec<SelectionCell>,
}

impl SelectionGrid {
    pub fn objective(&self, k: usize, m: usize, seed: u64) -> Option<f64> {
        self.cells.iter().find(|c| c.k == k && c.m == m && c.seed == seed).and_then(|c| c.objective)
    }

    /// Objectives over `k_values` at lag `m`; `None` if any cell is missing or flagged.
    pub fn k_curve(&self, m: usize, seed: u64) -> Option<Vec<f64>> {
        self.k_values.iter().map(|&k| self.objective(k, m, seed)).collect()
    }

    pub fn m_curve(&self, k: usize, seed: u64) -> Option<Vec<f64>> {
        self.m_values.iter().map(|&m| self.objective(k, m, seed)).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.cells {
            out.serialize(c).map_err(|e| Error::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Trains one model per cell and seed and scores it on `heldout`. Cells run in
/// parallel on up to `workers` threads; a failed cell is flagged, not fatal.
pub fn sweep(
    train: &[Trajectory],
    heldout: &[Trajectory],
    spec: &GridSpec,
    trainer: &Trainer,
    workers: usize,
) -> Result<SelectionGrid> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Config("selection needs nonempty training and held-out sets".into()));
    }
    if spec.cells.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("selection grid is empty".into()));
    }
    if spec.cells.iter().any(|&(k, m)| k == 0 || m == 0) {
        return Err(Error::Config("K and M must be positive".into()));
    }
    let jobs: Vec<(usize, usize, u64)> =
        spec.seeds.iter().flat_map(|&s| spec.cells.iter().map(move |&(k, m)| (k, m, s))).collect();
    let cells = map_ordered(&jobs, workers, |_, &(k, m, seed)| {
        let start = Instant::now();
        let (objective, flag) = match run_cell(train, heldout, trainer, k, m, seed) {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (None, Some(format!("non-finite objective {v}"))),
            Err(e) => (None, Some(e.to_string())),
        };
        if let Some(f) = &flag {
            log::warn!("cell K={k} M={m} seed={seed} flagged: {f}");
        }
        SelectionCell { k, m, seed, objective, runtime_secs: start.elapsed().as_secs_f64(), flag }
    });
    let sorted = |f: fn(&(usize, usize)) -> usize| {
        let mut v: Vec<usize> = spec.cells.iter().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    Ok(SelectionGrid { k_values: sorted(|c| c.0), m_values: sorted(|c| c.1), cells })
}

fn run_cell(train: &[Trajectory], heldout: &[Trajectory], trainer: &Trainer, k: usize, m: usize, seed: u64) -> Result<f64> {
    let cell_seed = rng::derive_seed(seed, &format!("select/{k}/{m}"));
    let mut init = rng::stream(cell_seed, "init");
    match trainer {
        Trainer::Msm { arch, optimizer } => {
            let arch = MsmArchitecture { num_regimes: k, num_initial: k, lag: m, ..arch.clone() };
            let model = MsmModel::random(&arch, &mut init)?;
            let opt = OptimizerConfig { seed: cell_seed, workers: 1, ..optimizer.clone() };
            let fit = fit_msm(&model, train, &opt)?;
            let mut total = 0.0;
            for z in heldout {
                total += log_likelihood(&fit.model, z)?;
            }
            Ok(total / heldout.len() as f64)
        }
        Trainer::Sds { arch, schedule } => {
            let prior = MsmArchitecture { num_regimes: k, num_initial: k, lag: m, ..arch.prior.clone() };
            let arch = SdsArchitecture { prior, ..arch.clone() };
            let model = SdsModel::random(&arch, &mut init)?;
            let sched = TrainSchedule { seed: cell_seed, workers: 1, ..schedule.clone() };
            let fit = train_sds(&model, train, &sched)?;
            let eval_seed = rng::derive_seed(cell_seed, "select/eval");
            Ok(mean_objective(&fit.model, heldout, sched.n_mc, 0.0, eval_seed, 1)?.elbo)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowChoice {
    pub index: usize,
    /// Set when the curve is flat and the choice defaulted to the first point.
    pub flat: bool,
}

/// First index `i` whose range-normalised gain `(y[i+1] - y[i]) / (max - min)`
/// falls below `rho`; the last index if none does.
pub fn elbow_select(curve: &[f64], rho: f64) -> Result<ElbowChoice> {
    if curve.len() < 3 {
        return Err(Error::Config(format!("elbow selection needs at least 3 points, got {}", curve.len())));
    }
    if curve.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numeric("elbow curve has non-finite values".into()));
    }
    let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = curve.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range <= 0.0 {
        return Ok(ElbowChoice { index: 0, flat: true });
    }
    let index = curve.windows(2).position(|w| (w[1] - w[0]) / range < rho).unwrap_or(curve.len() - 1);
    Ok(ElbowChoice { index, flat: false })
}
