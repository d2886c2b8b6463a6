//! Regime-dependent lagged causal graphs over the latent dimensions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `m x m x M` adjacency per regime.
///
/// Regime `k` is stored as an `m x mM` boolean matrix in the layout of a
/// transition Jacobian: entry `[j][(lag - 1) * m + i]` is the edge
/// `z_{t-lag, i} -> z_{t, j}`. `None` marks a regime with no supporting data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeGraphSet {
    pub dim: usize,
    pub lag: usize,
    pub graphs: Vec<Option<Vec<Vec<bool>>>>,
}

impl RegimeGraphSet {
    pub fn new(dim: usize, lag: usize, graphs: Vec<Option<Vec<Vec<bool>>>>) -> Result<Self> {
        for g in graphs.iter().flatten() {
            if g.len() != dim || g.iter().any(|row| row.len() != dim * lag) {
                return Err(Error::shape(format!("graph must be {dim} x {}", dim * lag)));
            }
        }
        Ok(RegimeGraphSet { dim, lag, graphs })
    }

    pub fn num_regimes(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_supported(&self, k: usize) -> bool {
        self.graphs[k].is_some()
    }

    /// Edge `source -> target` at `lag` (1-based) in regime `k`.
    pub fn edge(&self, k: usize, source: usize, target: usize, lag: usize) -> Option<bool> {
        self.graphs[k].as_ref().map(|g| g[target][(lag - 1) * self.dim + source])
    }

    pub fn num_edges(&self, k: usize) -> Option<usize> {
        self.graphs[k].as_ref().map(|g| g.iter().flatten().filter(|&&e| e).count())
    }

    /// Relabels regimes: new regime `j` is old regime `perm[j]`.
    pub fn permute_regimes(&self, perm: &[usize]) -> RegimeGraphSet {
        RegimeGraphSet { dim: self.dim, lag: self.lag, graphs: perm.iter().map(|&p| self.graphs[p].clone()).collect() }
    }
}
