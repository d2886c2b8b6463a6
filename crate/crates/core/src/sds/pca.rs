use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
const DEGENERATE_RATIO: f64 = 1e-12;

/// Linear principal component projection `y = components * (x - mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Row-major `dims x n`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl Pca {
    pub fn dims(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(x).zip(&self.mean).map(|((a, b), m)| a * (b - m)).sum()).collect()
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, &v) in self.components.iter().zip(y) {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi += v * ci;
            }
        }
        x
    }
}

/// Top `dims` principal directions of `data`. A covariance with fewer than
/// `dims` nonzero eigenvalues keeps only those, with a warning.
pub fn pca_fit(data: &[&[f64]], dims: usize) -> Result<Pca> {
    let n = data.first().map(|r| r.len()).ok_or_else(|| Error::Config("PCA needs data".into()))?;
    if dims == 0 || dims > n {
        return Err(Error::Config(format!("PCA dims must be in 1..={n}, got {dims}")));
    }
    if data.len() < dims {
        return Err(Error::Config(format!("PCA needs at least {dims} samples, got {}", data.len())));
    }
    if data.iter().any(|r| r.len() != n) {
        return Err(Error::shape("PCA rows differ in length"));
    }
    let count = data.len() as f64;
    let mut mean = vec![0.0; n];
    for r in data {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / count;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for r in data {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..n {
            for j in i..n {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            cov[(i, j)] /= count;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let usable = order.iter().take(dims).filter(|&&i| eig.eigenvalues[i] > DEGENERATE_RATIO * top && top > 0.0).count();
    if usable == 0 {
        return Err(Error::RankDeficient("PCA data has zero variance".into()));
    }
    if usable < dims {
        log::warn!("covariance has rank {usable} < {dims}; keeping {usable} components");
    }
    let mut components = Vec::with_capacity(usable);
    let mut explained = Vec::with_capacity(usable);
    for &i in order.iter().take(usable) {
        let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = (0..n).max_by(|&a, &b| c[a].abs().total_cmp(&c[b].abs())).unwrap();
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained.push(eig.eigenvalues[i].max(0.0));
    }
    let explained_variance_ratio = explained.iter().map(|v| v / total).collect();
    Ok(Pca { components, mean, explained_variance: explained, explained_variance_ratio })
}
