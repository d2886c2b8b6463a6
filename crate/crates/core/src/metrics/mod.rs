//! Scores of a recovered model against ground truth: regime F1, weak and
//! strong MCC, affine alignment, mean-function L2/R2 and causal-graph F1.
//!
//! Every metric resolves label and latent permutations first, so results are
//! invariant to the relabelings an identifiable model is only defined up to.

mod assignment;
mod evaluate;

pub use assignment::{hungarian, max_assignment};
pub use evaluate::{evaluate_latents, evaluate_msm, evaluate_sds, true_regime_probes, EvalOptions};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RegimeGraphSet;
use crate::msm::{MsmModel, Trajectory};

pub const TOL_DET: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeF1 {
    /// Macro F1 over the true classes.
    pub f1: f64,
    /// `permutation[i]` is the predicted label matched to true label `i`.
    pub permutation: Vec<usize>,
    /// Fewer predicted than true classes; unmatched true classes scored 0.
    pub padded: bool,
}

/// Per-class F1 of true class `i` against predicted class `j`.
pub fn f1_matrix(truth: &[usize], pred: &[usize], k_true: usize, k_pred: usize) -> Vec<Vec<f64>> {
    let mut conf = vec![vec![0usize; k_pred]; k_true];
    for (&t, &p) in truth.iter().zip(pred) {
        conf[t][p] += 1;
    }
    let true_count: Vec<usize> = conf.iter().map(|r| r.iter().sum()).collect();
    let pred_count: Vec<usize> = (0..k_pred).map(|j| conf.iter().map(|r| r[j]).sum()).collect();
    (0..k_true)
        .map(|i| {
            (0..k_pred)
                .map(|j| {
                    let denom = true_count[i] + pred_count[j];
                    if denom == 0 {
                        0.0
                    } else {
                        2.0 * conf[i][j] as f64 / denom as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Macro F1 after the regime relabeling that maximises it.
pub fn regime_f1(truth: &[usize], pred: &[usize], k_true: usize, k_pred: usize) -> Result<RegimeF1> {
    if truth.len() != pred.len() {
        return Err(Error::shape(format!("{} true labels vs {} predicted", truth.len(), pred.len())));
    }
    if truth.iter().any(|&t| t >= k_true) || pred.iter().any(|&p| p >= k_pred) {
        return Err(Error::shape("label out of range"));
    }
    let scores = f1_matrix(truth, pred, k_true, k_pred);
    let permutation = max_assignment(&scores);
    let f1 = (0..k_true).map(|i| scores[i].get(permutation[i]).copied().unwrap_or(0.0)).sum::<f64>() / k_true as f64;
    Ok(RegimeF1 { f1, permutation, padded: k_pred < k_true })
}

/// [`regime_f1`] with predictions taken as the argmax of each posterior row.
pub fn regime_f1_from_gamma(truth: &[usize], gamma: &[Vec<f64>], k_true: usize) -> Result<RegimeF1> {
    let k_pred = gamma.first().map_or(0, Vec::len);
    let pred: Vec<usize> = gamma.iter().map(|g| crate::msm::argmax(g)).collect();
    regime_f1(truth, &pred, k_true, k_pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MccMode {
    /// Least-squares affine map from estimate to truth, then per-dimension correlation.
    Weak,
    /// Optimal matching on the absolute correlation matrix.
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mcc {
    pub value: f64,
    pub per_dim: Vec<f64>,
    /// For strong MCC, the estimated dimension matched to each true one.
    pub matching: Vec<usize>,
    /// Some dimension had zero variance; its correlation counts as 0.
    pub degenerate: bool,
}

fn column_stats(z: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    let d = z.dim();
    let n = z.len() as f64;
    let mut mean = vec![0.0; d];
    for row in z.data().chunks(d) {
        for i in 0..d {
            mean[i] += row[i];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; d];
    for row in z.data().chunks(d) {
        for i in 0..d {
            var[i] += (row[i] - mean[i]).powi(2);
        }
    }
    (mean, var)
}

/// Absolute Pearson correlations, `dim(a) x dim(b)`, with zero for constant columns.
pub fn abs_correlation(a: &Trajectory, b: &Trajectory) -> Result<(Vec<Vec<f64>>, bool)> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    let (ma, va) = column_stats(a);
    let (mb, vb) = column_stats(b);
    let (da, db) = (a.dim(), b.dim());
    let mut cov = vec![vec![0.0; db]; da];
    for (ra, rb) in a.data().chunks(da).zip(b.data().chunks(db)) {
        for i in 0..da {
            let x = ra[i] - ma[i];
            for j in 0..db {
                cov[i][j] += x * (rb[j] - mb[j]);
            }
        }
    }
    let mut degenerate = false;
    for i in 0..da {
        for j in 0..db {
            let s = (va[i] * vb[j]).sqrt();
            if s > 0.0 {
                cov[i][j] = (cov[i][j] / s).abs().min(1.0);
            } else {
                cov[i][j] = 0.0;
                degenerate = true;
            }
        }
    }
    Ok((cov, degenerate))
}

pub fn mcc(truth: &Trajectory, est: &Trajectory, mode: MccMode) -> Result<Mcc> {
    match mode {
        MccMode::Strong => {
            let (corr, degenerate) = abs_correlation(truth, est)?;
            let matching = max_assignment(&corr);
            let per_dim: Vec<f64> =
                (0..truth.dim()).map(|i| corr[i].get(matching[i]).copied().unwrap_or(0.0)).collect();
            let value = per_dim.iter().sum::<f64>() / per_dim.len() as f64;
            Ok(Mcc { value, per_dim, matching, degenerate })
        }
        MccMode::Weak => {
            let fit = least_squares_affine(truth, est)?;
            let mapped = est.map_rows(truth.dim(), |r| fit.apply(r))?;
            let (corr, degenerate) = abs_correlation(truth, &mapped)?;
            let per_dim: Vec<f64> = (0..truth.dim()).map(|i| corr[i][i]).collect();
            let value = per_dim.iter().sum::<f64>() / per_dim.len() as f64;
            Ok(Mcc { value, per_dim, matching: (0..truth.dim()).collect(), degenerate })
        }
    }
}

/// Affine map `x -> A x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// Row-major `dim_out x dim_in`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn identity(d: usize) -> Self {
        AffineMap { a: (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect(), b: vec![0.0; d] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b).collect()
    }

    pub fn inverse(&self) -> Result<AffineMap> {
        let d = self.b.len();
        let a = DMatrix::from_fn(d, d, |i, j| self.a[i][j]);
        if a.determinant().abs() <= TOL_DET {
            return Err(Error::RankDeficient("alignment matrix is singular".into()));
        }
        let inv = a.try_inverse().ok_or_else(|| Error::RankDeficient("alignment matrix is singular".into()))?;
        let b = -(&inv * DVector::from_column_slice(&self.b));
        Ok(AffineMap { a: (0..d).map(|i| (0..d).map(|j| inv[(i, j)]).collect()).collect(), b: b.iter().copied().collect() })
    }
}

/// Least-squares `truth ~ A est + b`.
pub fn least_squares_affine(truth: &Trajectory, est: &Trajectory) -> Result<AffineMap> {
    let (dt, de) = (truth.dim(), est.dim());
    if truth.len() != est.len() {
        return Err(Error::shape(format!("{} vs {} samples", truth.len(), est.len())));
    }
    if truth.len() < de + 1 {
        return Err(Error::RankDeficient(format!("{} samples cannot fit {} parameters per row", truth.len(), de + 1)));
    }
    let (mt, _) = column_stats(truth);
    let (me, _) = column_stats(est);
    let mut cee = DMatrix::<f64>::zeros(de, de);
    let mut cte = DMatrix::<f64>::zeros(dt, de);
    let mut xe = vec![0.0; de];
    for (rt, re) in truth.data().chunks(dt).zip(est.data().chunks(de)) {
        for j in 0..de {
            xe[j] = re[j] - me[j];
        }
        for i in 0..de {
            for j in 0..de {
                cee[(i, j)] += xe[i] * xe[j];
            }
        }
        for i in 0..dt {
            let y = rt[i] - mt[i];
            for j in 0..de {
                cte[(i, j)] += y * xe[j];
            }
        }
    }
    let eig = cee.clone().symmetric_eigen();
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > 0.0) || lo <= hi * 1e-12 {
        return Err(Error::RankDeficient("estimated latents do not span their space".into()));
    }
    let inv = cee.try_inverse().ok_or_else(|| Error::RankDeficient("singular covariance".into()))?;
    let a = cte * inv;
    let b: Vec<f64> = (0..dt).map(|i| mt[i] - (0..de).map(|j| a[(i, j)] * me[j]).sum::<f64>()).collect();
    Ok(AffineMap { a: (0..dt).map(|i| (0..de).map(|j| a[(i, j)]).collect()).collect(), b })
}

/// `truth ~ A est + b`, together with `A ~ D P`: `(A est)_i ~ d_i est_{p(i)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineAlignment {
    pub map: AffineMap,
    /// `permutation[i]` is the estimated dimension that true dimension `i` reads.
    pub permutation: Vec<usize>,
    pub scale: Vec<f64>,
}

impl AffineAlignment {
    pub fn identity(d: usize) -> Self {
        AffineAlignment { map: AffineMap::identity(d), permutation: (0..d).collect(), scale: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.map.b.len()
    }
}

pub fn fit_affine_alignment(truth: &Trajectory, est: &Trajectory) -> Result<AffineAlignment> {
    if truth.dim() != est.dim() {
        return Err(Error::shape(format!("true dim {} vs estimated dim {}", truth.dim(), est.dim())));
    }
    let map = least_squares_affine(truth, est)?;
    let d = map.b.len();
    let det = DMatrix::from_fn(d, d, |i, j| map.a[i][j]).determinant();
    if det.abs() <= TOL_DET {
        return Err(Error::RankDeficient(format!("|det A| = {:e}", det.abs())));
    }
    let abs: Vec<Vec<f64>> = map.a.iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
    let permutation = max_assignment(&abs);
    let scale = (0..d).map(|i| map.a[i][permutation[i]]).collect();
    Ok(AffineAlignment { map, permutation, scale })
}

/// Affine-aligned mean-function discrepancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFunctionFit {
    /// Mean over supported regimes of the average squared L2 distance.
    pub l2: f64,
    /// Mean over supported regimes of `1 - L2 / Var`.
    pub r2: f64,
    /// `(l2, r2)` per true regime; `None` when the probe set is empty.
    pub per_regime: Vec<Option<(f64, f64)>>,
}

fn regime_fit(
    truth: &MsmModel,
    est: &MsmModel,
    k: usize,
    j: usize,
    align: &AffineAlignment,
    inv: &AffineMap,
    probes: &[Vec<f64>],
) -> (f64, f64) {
    let m = truth.dim;
    let n = probes.len() as f64;
    let mut means = Vec::with_capacity(probes.len());
    let mut centre = vec![0.0; m];
    for w in probes {
        let mu = truth.transition_mean_unchecked(k, w);
        for i in 0..m {
            centre[i] += mu[i] / n;
        }
        means.push(mu);
    }
    let mut dist = 0.0;
    let mut var = 0.0;
    let mut est_window = vec![0.0; m * est.lag];
    for (w, mu) in probes.iter().zip(&means) {
        for blk in 0..est.lag {
            let mapped = inv.apply(&w[blk * m..(blk + 1) * m]);
            est_window[blk * m..(blk + 1) * m].copy_from_slice(&mapped);
        }
        let pred = align.map.apply(&est.transition_mean_unchecked(j, &est_window));
        for i in 0..m {
            dist += (mu[i] - pred[i]).powi(2) / n;
            var += (mu[i] - centre[i]).powi(2) / n;
        }
    }
    let r2 = if var > 0.0 { 1.0 - dist / var } else { f64::NEG_INFINITY };
    (dist, r2)
}

fn check_l2_inputs(truth: &MsmModel, est: &MsmModel, align: &AffineAlignment, probes: &[Vec<Vec<f64>>]) -> Result<()> {
    if truth.dim != est.dim || align.dim() != truth.dim {
        return Err(Error::shape("true model, estimate and alignment must share the latent dimension"));
    }
    if truth.lag != est.lag {
        return Err(Error::shape(format!("lag {} vs {}", truth.lag, est.lag)));
    }
    if probes.len() != truth.num_regimes {
        return Err(Error::shape("one probe set per true regime is required"));
    }
    if probes.iter().flatten().any(|w| w.len() != truth.window_dim()) {
        return Err(Error::shape("probe windows have the wrong length"));
    }
    Ok(())
}

/// Compares true regime `k` on `probes[k]` (true-space windows) against estimated
/// regime `sigma[k]`, feeding the estimate the inversely aligned window and mapping
/// its output forward.
pub fn mean_function_l2(
    truth: &MsmModel,
    est: &MsmModel,
    align: &AffineAlignment,
    sigma: &[usize],
    probes: &[Vec<Vec<f64>>],
) -> Result<MeanFunctionFit> {
    check_l2_inputs(truth, est, align, probes)?;
    if sigma.len() != truth.num_regimes || sigma.iter().any(|&j| j >= est.num_regimes) {
        return Err(Error::shape("regime permutation does not fit the models"));
    }
    let inv = align.map.inverse()?;
    let per_regime: Vec<Option<(f64, f64)>> = (0..truth.num_regimes)
        .map(|k| (!probes[k].is_empty()).then(|| regime_fit(truth, est, k, sigma[k], align, &inv, &probes[k])))
        .collect();
    summarise(per_regime)
}

fn summarise(per_regime: Vec<Option<(f64, f64)>>) -> Result<MeanFunctionFit> {
    let used: Vec<(f64, f64)> = per_regime.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::Config("every probe set is empty".into()));
    }
    let n = used.len() as f64;
    Ok(MeanFunctionFit {
        l2: used.iter().map(|v| v.0).sum::<f64>() / n,
        r2: used.iter().map(|v| v.1).sum::<f64>() / n,
        per_regime,
    })
}

/// Like [`mean_function_l2`] but picks the regime matching that maximises mean R2.
pub fn mean_function_l2_best_permutation(
    truth: &MsmModel,
    est: &MsmModel,
    align: &AffineAlignment,
    probes: &[Vec<Vec<f64>>],
) -> Result<(MeanFunctionFit, Vec<usize>)> {
    check_l2_inputs(truth, est, align, probes)?;
    let inv = align.map.inverse()?;
    let k = truth.num_regimes;
    let table: Vec<Vec<Option<(f64, f64)>>> = (0..k)
        .map(|t| {
            (0..est.num_regimes)
                .map(|j| (!probes[t].is_empty()).then(|| regime_fit(truth, est, t, j, align, &inv, &probes[t])))
                .collect()
        })
        .collect();
    let score: Vec<Vec<f64>> =
        table.iter().map(|r| r.iter().map(|c| c.map_or(0.0, |v| v.1.max(-1e6))).collect()).collect();
    let sigma = max_assignment(&score);
    if sigma.iter().any(|&j| j >= est.num_regimes) {
        return Err(Error::shape("estimate has fewer regimes than the truth"));
    }
    let per_regime = (0..k).map(|t| table[t][sigma[t]]).collect();
    Ok((summarise(per_regime)?, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalF1 {
    pub f1: f64,
    pub per_regime: Vec<f64>,
    /// Some compared regime had no estimated graph or an undefined precision/recall.
    pub flagged: bool,
}

fn edge_f1(truth: &[Vec<bool>], est: &[Vec<bool>]) -> (f64, bool) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (rt, re) in truth.iter().zip(est) {
        for (&t, &e) in rt.iter().zip(re) {
            match (t, e) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
    }
    if tp + fp + fneg == 0 {
        return (1.0, false);
    }
    if tp == 0 {
        return (0.0, tp + fp == 0 || tp + fneg == 0);
    }
    (2.0 * tp as f64 / (2 * tp + fp + fneg) as f64, false)
}

/// Mean over true regimes of the edge F1 against estimated regime `sigma[k]`,
/// with estimated node `perm[i]` standing for true node `i`.
pub fn causal_f1(truth: &RegimeGraphSet, est: &RegimeGraphSet, sigma: &[usize], perm: &[usize]) -> Result<CausalF1> {
    let (m, lag) = (truth.dim, truth.lag);
    if est.dim != m || est.lag != lag {
        return Err(Error::shape(format!("graphs are {m}x{m}x{lag} vs {}x{}x{}", est.dim, est.dim, est.lag)));
    }
    if sigma.len() != truth.num_regimes() || sigma.iter().any(|&j| j >= est.num_regimes()) || perm.len() != m {
        return Err(Error::shape("alignment does not fit the graph sets"));
    }
    let mut flagged = false;
    let mut per_regime = Vec::with_capacity(sigma.len());
    for (k, &j) in sigma.iter().enumerate() {
        let Some(t) = &truth.graphs[k] else {
            return Err(Error::Config(format!("true graph of regime {k} is missing")));
        };
        let Some(e) = &est.graphs[j] else {
            flagged = true;
            per_regime.push(0.0);
            continue;
        };
        let aligned: Vec<Vec<bool>> = (0..m)
            .map(|row| (0..m * lag).map(|c| e[perm[row]][(c / m) * m + perm[c % m]]).collect())
            .collect();
        let (f, flag) = edge_f1(t, &aligned);
        flagged |= flag;
        per_regime.push(f);
    }
    let f1 = per_regime.iter().sum::<f64>() / per_regime.len() as f64;
    Ok(CausalF1 { f1, per_regime, flagged })
}

/// One row of a multi-seed evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub setting: String,
    pub seed: u64,
    pub regime_f1: f64,
    pub weak_mcc: Option<f64>,
    pub strong_mcc: Option<f64>,
    pub causal_f1: Option<f64>,
    pub l2: Option<f64>,
    pub r2: Option<f64>,
    pub regime_permutation: Vec<usize>,
    pub alignment: Option<AffineAlignment>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// CSV with one line per report.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("setting,seed,regime_f1,weak_mcc,strong_mcc,causal_f1,l2,r2\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.setting,
            r.seed,
            r.regime_f1,
            opt(r.weak_mcc),
            opt(r.strong_mcc),
            opt(r.causal_f1),
            opt(r.l2),
            opt(r.r2)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rows: &[Vec<f64>]) -> Trajectory {
        Trajectory::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_labels_score_one() {
        let s = [0, 0, 1, 2, 2, 1];
        let r = regime_f1(&s, &s, 3, 3).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.permutation, vec![0, 1, 2]);
    }

    #[test]
    fn relabelled_prediction_recovers_relabelling() {
        let s = [0, 0, 1, 2, 2, 1, 0];
        let map = [2, 0, 1];
        let p: Vec<usize> = s.iter().map(|&v| map[v]).collect();
        let r = regime_f1(&s, &p, 3, 3).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.permutation, map.to_vec());
    }

    #[test]
    fn fewer_predicted_classes_are_padded() {
        let r = regime_f1(&[0, 1, 2], &[0, 1, 1], 3, 2).unwrap();
        assert!(r.padded);
        assert!(r.f1 < 1.0);
    }

    #[test]
    fn scaled_shifted_estimate_aligns_to_half() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let truth = traj(&rows);
        let est = traj(&rows.iter().map(|r| r.iter().map(|v| 2.0 * v + 1.0).collect()).collect::<Vec<_>>());
        let a = fit_affine_alignment(&truth, &est).unwrap();
        for i in 0..2 {
            assert!((a.map.a[i][i] - 0.5).abs() < 1e-10);
            assert!((a.map.b[i] + 0.5).abs() < 1e-10);
        }
        assert_eq!(a.permutation, vec![0, 1]);
    }

    #[test]
    fn constant_estimate_is_rank_deficient() {
        let truth = traj(&[vec![0.0], vec![1.0], vec![2.0]]);
        let est = traj(&[vec![1.0], vec![1.0], vec![1.0]]);
        assert!(matches!(fit_affine_alignment(&truth, &est), Err(Error::RankDeficient(_))));
        let strong = mcc(&truth, &est, MccMode::Strong).unwrap();
        assert!(strong.degenerate);
        assert_eq!(strong.value, 0.0);
    }

    #[test]
    fn empty_estimated_graph_scores_zero() {
        let t = RegimeGraphSet::new(2, 1, vec![Some(vec![vec![true, false], vec![false, true]])]).unwrap();
        let e = RegimeGraphSet::new(2, 1, vec![Some(vec![vec![false; 2]; 2])]).unwrap();
        let r = causal_f1(&t, &e, &[0], &[0, 1]).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(r.flagged);
        let both_empty = causal_f1(&e, &e, &[0], &[0, 1]).unwrap();
        assert_eq!(both_empty.f1, 1.0);
    }

    #[test]
    fn csv_has_one_line_per_report() {
        let r = MetricReport {
            setting: "A".into(),
            seed: 1,
            regime_f1: 0.9,
            weak_mcc: Some(0.99),
            strong_mcc: None,
            causal_f1: None,
            l2: None,
            r2: None,
            regime_permutation: vec![0],
            alignment: None,
        };
        let csv = reports_to_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("A,1,0.9,0.99,,"));
    }
}
