use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{inverse_softplus, sigmoid, softplus, Activation, MaskedMlp, Mlp};

/// Floor added to every softplus-parameterised variance.
pub const VAR_FLOOR: f64 = 1e-6;

/// Logit used to encode an exactly-zero probability; `exp(-1000)` underflows to 0.
pub const IMPOSSIBLE_LOGIT: f64 = -1000.0;

/// Diagonal transition covariance, stored through unconstrained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CovarianceSpec {
    /// One diagonal shared by all regimes: `softplus(raw) + VAR_FLOOR`.
    Constant { raw: Vec<f64> },
    /// A diagonal per regime: `softplus(raw[k]) + VAR_FLOOR`.
    Heterogeneous { raw: Vec<Vec<f64>> },
    /// `C_k * sigmoid(mean)`, elementwise, with `C_k = softplus(raw_scale[k]) + VAR_FLOOR`.
    HistoryDependent { raw_scale: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Constant,
    Heterogeneous,
    HistoryDependent,
}

impl CovarianceSpec {
    pub fn kind(&self) -> CovarianceKind {
        match self {
            CovarianceSpec::Constant { .. } => CovarianceKind::Constant,
            CovarianceSpec::Heterogeneous { .. } => CovarianceKind::Heterogeneous,
            CovarianceSpec::HistoryDependent { .. } => CovarianceKind::HistoryDependent,
        }
    }

    pub fn constant(var: &[f64]) -> Self {
        CovarianceSpec::Constant { raw: var.iter().map(|&v| raw_from_var(v)).collect() }
    }

    pub fn heterogeneous(vars: &[Vec<f64>]) -> Self {
        CovarianceSpec::Heterogeneous {
            raw: vars.iter().map(|r| r.iter().map(|&v| raw_from_var(v)).collect()).collect(),
        }
    }

    pub fn history_dependent(scales: &[f64]) -> Self {
        CovarianceSpec::HistoryDependent { raw_scale: scales.iter().map(|&c| raw_from_var(c)).collect() }
    }

    /// Variance diagonal of regime `k` given that regime's mean output.
    #[inline]
    pub fn variance(&self, k: usize, mean: &[f64]) -> Vec<f64> {
        match self {
            CovarianceSpec::Constant { raw } => raw.iter().map(|&r| var_from_raw(r)).collect(),
            CovarianceSpec::Heterogeneous { raw } => raw[k].iter().map(|&r| var_from_raw(r)).collect(),
            CovarianceSpec::HistoryDependent { raw_scale } => {
                let c = var_from_raw(raw_scale[k]);
                mean.iter().map(|&mu| c * sigmoid(mu)).collect()
            }
        }
    }

    /// History-dependent scale `C_k`, if applicable.
    pub fn scale(&self, k: usize) -> Option<f64> {
        match self {
            CovarianceSpec::HistoryDependent { raw_scale } => Some(var_from_raw(raw_scale[k])),
            _ => None,
        }
    }

    pub fn raw_slices(&self) -> Vec<&[f64]> {
        match self {
            CovarianceSpec::Constant { raw } => vec![raw.as_slice()],
            CovarianceSpec::Heterogeneous { raw } => raw.iter().map(Vec::as_slice).collect(),
            CovarianceSpec::HistoryDependent { raw_scale } => vec![raw_scale.as_slice()],
        }
    }

    pub fn raw_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            CovarianceSpec::Constant { raw } => vec![raw.as_mut_slice()],
            CovarianceSpec::Heterogeneous { raw } => raw.iter_mut().map(Vec::as_mut_slice).collect(),
            CovarianceSpec::HistoryDependent { raw_scale } => vec![raw_scale.as_mut_slice()],
        }
    }

    /// Flat length of the raw parameters, in `raw_slices` order.
    pub fn raw_len(&self) -> usize {
        self.raw_slices().iter().map(|s| s.len()).sum()
    }

    fn validate(&self, k: usize, m: usize) -> Result<()> {
        let ok = match self {
            CovarianceSpec::Constant { raw } => raw.len() == m,
            CovarianceSpec::Heterogeneous { raw } => raw.len() == k && raw.iter().all(|r| r.len() == m),
            CovarianceSpec::HistoryDependent { raw_scale } => raw_scale.len() == k,
        };
        if !ok {
            return Err(Error::InvalidModel(format!("covariance parameters do not match K={k}, m={m}")));
        }
        if self.raw_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite covariance parameter".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn var_from_raw(raw: f64) -> f64 {
    softplus(raw) + VAR_FLOOR
}

#[inline]
pub fn raw_from_var(var: f64) -> f64 {
    inverse_softplus((var - VAR_FLOOR).max(1e-300))
}

/// Parameter groups that training stages freeze or release together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Transition,
    Covariance,
    Initial,
    /// `pi`, `Q` and the entry matrix.
    Switch,
}

/// A single network used by every regime when the input norm lies inside
/// `[lo, hi]`. Only synthetic ablation generators carry one; it is not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBand {
    pub net: Mlp,
    pub lo: f64,
    pub hi: f64,
}

impl SharedBand {
    #[inline]
    pub fn contains(&self, window: &[f64]) -> bool {
        let norm = window.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm >= self.lo && norm <= self.hi
    }
}

/// Shape of a randomly initialised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmArchitecture {
    pub num_regimes: usize,
    pub num_initial: usize,
    pub lag: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub covariance: CovarianceKind,
}

impl MsmArchitecture {
    pub fn new(num_regimes: usize, lag: usize, dim: usize) -> Self {
        MsmArchitecture {
            num_regimes,
            num_initial: num_regimes,
            lag,
            dim,
            hidden: vec![16],
            activation: Activation::Cosine,
            covariance: CovarianceKind::Heterogeneous,
        }
    }

    pub fn with_covariance(mut self, kind: CovarianceKind) -> Self {
        self.covariance = kind;
        self
    }

    pub fn net_dims(&self) -> Vec<usize> {
        let mut d = vec![self.dim * self.lag];
        d.extend(&self.hidden);
        d.push(self.dim);
        d
    }
}

/// Multi-lag Markov switching model with Gaussian transitions.
///
/// The regime at time `M` (1-based) takes `K0` values and selects the initial
/// Gaussian over `z_{1:M}`; later regimes take `K` values and select the
/// transition `N(z_t; m(z_{t-1..t-M}, k), Sigma(., k))`. When `K0 == K` the
/// labels are shared and `Q` also drives the first step; otherwise a separate
/// `K0 x K` entry matrix does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    pub num_regimes: usize,
    pub num_initial: usize,
    pub lag: usize,
    pub dim: usize,
    pub pi_logits: Vec<f64>,
    /// Row-major `K x K`; row `i` holds the logits of `p(s_t = . | s_{t-1} = i)`.
    pub q_logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_logits: Option<Vec<f64>>,
    pub init_means: Vec<Vec<f64>>,
    pub init_var_raw: Vec<Vec<f64>>,
    pub transitions: Vec<MaskedMlp>,
    pub covariance: CovarianceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_band: Option<SharedBand>,
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub(crate) fn logits_from_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|&v| if v > 0.0 { v.ln() } else { IMPOSSIBLE_LOGIT }).collect()
}

impl MsmModel {
    pub fn random<R: Rng + ?Sized>(arch: &MsmArchitecture, rng: &mut R) -> Result<Self> {
        let (k, k0, lag, m) = (arch.num_regimes, arch.num_initial, arch.lag, arch.dim);
        if k == 0 || k0 == 0 || lag == 0 || m == 0 {
            return Err(Error::InvalidModel("K, K0, M and m must all be positive".into()));
        }
        let dims = arch.net_dims();
        let transitions = (0..k)
            .map(|_| Mlp::with_rng(&dims, arch.activation, rng).map(MaskedMlp::dense))
            .collect::<Result<Vec<_>>>()?;
        let covariance = match arch.covariance {
            CovarianceKind::Constant => CovarianceSpec::constant(&vec![0.1; m]),
            CovarianceKind::Heterogeneous => CovarianceSpec::heterogeneous(&vec![vec![0.1; m]; k]),
            CovarianceKind::HistoryDependent => CovarianceSpec::history_dependent(&vec![0.2; k]),
        };
        let noise = |rng: &mut R| rng.gen_range(-0.1..0.1);
        let model = MsmModel {
            num_regimes: k,
            num_initial: k0,
            lag,
            dim: m,
            pi_logits: (0..k0).map(|_| noise(rng)).collect(),
            q_logits: (0..k * k).map(|_| noise(rng)).collect(),
            entry_logits: (k0 != k).then(|| (0..k0 * k).map(|_| noise(rng)).collect()),
            init_means: (0..k0).map(|_| (0..m * lag).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            init_var_raw: vec![vec![raw_from_var(1.0); m * lag]; k0],
            transitions,
            covariance,
            shared_band: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let (k, k0, lag, m) = (self.num_regimes, self.num_initial, self.lag, self.dim);
        if k == 0 || k0 == 0 || lag == 0 || m == 0 {
            return Err(Error::InvalidModel("K, K0, M and m must all be positive".into()));
        }
        if self.pi_logits.len() != k0 || self.q_logits.len() != k * k {
            return Err(Error::InvalidModel("switch parameters have the wrong size".into()));
        }
        match (&self.entry_logits, k0 == k) {
            (None, true) => {}
            (Some(e), false) if e.len() == k0 * k => {}
            _ => return Err(Error::InvalidModel("entry matrix must be present iff K0 != K, with K0*K entries".into())),
        }
        if self.init_means.len() != k0
            || self.init_var_raw.len() != k0
            || self.init_means.iter().chain(&self.init_var_raw).any(|v| v.len() != m * lag)
        {
            return Err(Error::InvalidModel("initial components have the wrong size".into()));
        }
        if self.transitions.len() != k {
            return Err(Error::InvalidModel(format!("expected {k} transition networks")));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.base.input_dim() != m * lag || t.base.output_dim() != m {
                return Err(Error::InvalidModel(format!("transition {i} must map R^{} to R^{m}", m * lag)));
            }
            if !t.base.activation().is_analytic() {
                return Err(Error::InvalidModel(format!("transition {i} uses a non-analytic activation")));
            }
        }
        if let Some(b) = &self.shared_band {
            if b.net.input_dim() != m * lag || b.net.output_dim() != m || !b.net.activation().is_analytic() {
                return Err(Error::InvalidModel("shared band network has the wrong shape".into()));
            }
        }
        self.covariance.validate(k, m)?;
        let all = self
            .pi_logits
            .iter()
            .chain(&self.q_logits)
            .chain(self.entry_logits.iter().flatten())
            .chain(self.init_means.iter().flatten())
            .chain(self.init_var_raw.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(())
    }

    pub fn window_dim(&self) -> usize {
        self.dim * self.lag
    }

    pub fn pi(&self) -> Vec<f64> {
        softmax(&self.pi_logits)
    }

    pub fn log_pi(&self) -> Vec<f64> {
        log_softmax(&self.pi_logits)
    }

    /// Row-stochastic `Q` as rows.
    pub fn q(&self) -> Vec<Vec<f64>> {
        self.q_logits.chunks(self.num_regimes).map(softmax).collect()
    }

    pub fn log_q(&self) -> Vec<Vec<f64>> {
        self.q_logits.chunks(self.num_regimes).map(log_softmax).collect()
    }

    /// Matrix driving `s_M -> s_{M+1}`: `Q` when labels are shared.
    pub fn log_entry(&self) -> Vec<Vec<f64>> {
        match &self.entry_logits {
            Some(e) => e.chunks(self.num_regimes).map(log_softmax).collect(),
            None => self.log_q(),
        }
    }

    pub fn set_pi(&mut self, pi: &[f64]) {
        self.pi_logits = logits_from_probs(pi);
    }

    pub fn set_q(&mut self, rows: &[Vec<f64>]) {
        self.q_logits = rows.iter().flat_map(|r| logits_from_probs(r)).collect();
    }

    pub fn init_var(&self, a: usize) -> Vec<f64> {
        self.init_var_raw[a].iter().map(|&r| var_from_raw(r)).collect()
    }

    pub fn set_init_var(&mut self, a: usize, var: &[f64]) {
        self.init_var_raw[a] = var.iter().map(|&v| raw_from_var(v)).collect();
    }

    /// Index of the network evaluated for regime `k` on `window`: `None` for
    /// the shared band network.
    #[inline]
    pub(crate) fn routes_to_band(&self, window: &[f64]) -> bool {
        self.shared_band.as_ref().is_some_and(|b| b.contains(window))
    }

    /// Transition mean `m(window, k)`.
    pub fn transition_mean(&self, k: usize, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.window_dim() {
            return Err(Error::shape(format!("window has length {}, expected {}", window.len(), self.window_dim())));
        }
        Ok(self.transition_mean_unchecked(k, window))
    }

    #[inline]
    pub(crate) fn transition_mean_unchecked(&self, k: usize, window: &[f64]) -> Vec<f64> {
        match &self.shared_band {
            Some(b) if b.contains(window) => b.net.forward_unchecked(window),
            _ => self.transitions[k].base.forward_unchecked(window),
        }
    }

    /// Transition mean and variance diagonal.
    pub fn transition_moments(&self, k: usize, window: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mean = self.transition_mean(k, window)?;
        let var = self.covariance.variance(k, &mean);
        Ok((mean, var))
    }

    /// Jacobian of `m(., k)` at `window`.
    pub fn transition_jacobian(&self, k: usize, window: &[f64]) -> Result<Vec<Vec<f64>>> {
        match &self.shared_band {
            Some(b) if b.contains(window) => b.net.jacobian(window),
            _ => self.transitions[k].jacobian(window),
        }
    }

    /// Every trainable parameter block, tagged with its group. The order matches
    /// [`MsmGradient::param_slices`](crate::msm::MsmGradient::param_slices).
    pub fn param_slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out = Vec::new();
        for t in &mut self.transitions {
            out.extend(t.base.param_slices_mut().into_iter().map(|s| (ParamGroup::Transition, s)));
        }
        out.extend(self.covariance.raw_slices_mut().into_iter().map(|s| (ParamGroup::Covariance, s)));
        out.extend(self.init_means.iter_mut().map(|s| (ParamGroup::Initial, s.as_mut_slice())));
        out.extend(self.init_var_raw.iter_mut().map(|s| (ParamGroup::Initial, s.as_mut_slice())));
        out.push((ParamGroup::Switch, self.pi_logits.as_mut_slice()));
        out.push((ParamGroup::Switch, self.q_logits.as_mut_slice()));
        if let Some(e) = &mut self.entry_logits {
            out.push((ParamGroup::Switch, e.as_mut_slice()));
        }
        out
    }

    /// Zeroes masked weights of every transition network.
    pub fn apply_masks(&mut self) {
        for t in &mut self.transitions {
            t.apply_mask();
        }
    }

    /// Fresh random parameters with the same architecture, masks and covariance mode.
    pub fn reinitialized<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MsmModel> {
        let mut out = self.clone();
        for t in &mut out.transitions {
            t.base = Mlp::with_rng(t.base.dims(), t.base.activation(), rng)?;
            t.apply_mask();
        }
        for v in out.pi_logits.iter_mut().chain(out.q_logits.iter_mut()).chain(out.entry_logits.iter_mut().flatten()) {
            *v = rng.gen_range(-0.1..0.1);
        }
        for v in out.init_means.iter_mut().flatten() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in out.init_var_raw.iter_mut().flatten() {
            *v = raw_from_var(1.0);
        }
        out.covariance = match &self.covariance {
            CovarianceSpec::Constant { raw } => CovarianceSpec::constant(&vec![0.1; raw.len()]),
            CovarianceSpec::Heterogeneous { raw } => CovarianceSpec::heterogeneous(&vec![vec![0.1; self.dim]; raw.len()]),
            CovarianceSpec::HistoryDependent { raw_scale } => CovarianceSpec::history_dependent(&vec![0.2; raw_scale.len()]),
        };
        Ok(out)
    }

    /// Relabels regimes: new regime `j` is old regime `perm[j]`. Requires `K0 == K`.
    pub fn permute_regimes(&self, perm: &[usize]) -> Result<MsmModel> {
        let k = self.num_regimes;
        if self.num_initial != k || perm.len() != k {
            return Err(Error::InvalidModel("regime permutation needs K0 == K and a full permutation".into()));
        }
        let mut out = self.clone();
        for j in 0..k {
            out.pi_logits[j] = self.pi_logits[perm[j]];
            out.init_means[j] = self.init_means[perm[j]].clone();
            out.init_var_raw[j] = self.init_var_raw[perm[j]].clone();
            out.transitions[j] = self.transitions[perm[j]].clone();
            for l in 0..k {
                out.q_logits[j * k + l] = self.q_logits[perm[j] * k + perm[l]];
            }
        }
        out.covariance = match &self.covariance {
            CovarianceSpec::Constant { raw } => CovarianceSpec::Constant { raw: raw.clone() },
            CovarianceSpec::Heterogeneous { raw } => {
                CovarianceSpec::Heterogeneous { raw: perm.iter().map(|&p| raw[p].clone()).collect() }
            }
            CovarianceSpec::HistoryDependent { raw_scale } => {
                CovarianceSpec::HistoryDependent { raw_scale: perm.iter().map(|&p| raw_scale[p]).collect() }
            }
        };
        Ok(out)
    }
}

/// A continuous trajectory `z_{1:T}`, row-major `T x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("trajectory contains non-finite values".into()));
        }
        Ok(Trajectory { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged trajectory rows"));
        }
        Trajectory::new(rows.concat(), dim)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// `(z_{t-1}, ..., z_{t-lag})` for 0-based row `t >= lag`.
    pub fn window(&self, t: usize, lag: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(lag * self.dim);
        for tau in 1..=lag {
            w.extend_from_slice(self.row(t - tau));
        }
        w
    }

    /// `z_{1:M}` flattened.
    pub fn head(&self, lag: usize) -> &[f64] {
        &self.data[..lag * self.dim]
    }

    /// All windows `(t >= lag)` in time order.
    pub fn windows(&self, lag: usize) -> Vec<Vec<f64>> {
        (lag..self.len()).map(|t| self.window(t, lag)).collect()
    }

    /// Rows of every trajectory stacked in order.
    pub fn concat(parts: &[Trajectory]) -> Result<Trajectory> {
        let dim = parts.first().map_or(0, |p| p.dim);
        if dim == 0 || parts.iter().any(|p| p.dim != dim) {
            return Err(Error::shape("cannot stack trajectories of different dimension"));
        }
        Ok(Trajectory { dim, data: parts.iter().flat_map(|p| p.data.iter().copied()).collect() })
    }

    /// Applies `f` to every row.
    pub fn map_rows(&self, out_dim: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Trajectory> {
        let mut data = Vec::with_capacity(self.len() * out_dim);
        for row in self.data.chunks(self.dim) {
            let y = f(row);
            if y.len() != out_dim {
                return Err(Error::shape("row map returned the wrong width"));
            }
            data.extend(y);
        }
        Trajectory::new(data, out_dim)
    }
}
