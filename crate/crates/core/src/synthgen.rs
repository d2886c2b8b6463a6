//! Ground-truth switching benchmarks: cyclic regime chains, graph-constrained
//! cosine transitions, three noise modes and a Leaky ReLU emission.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RegimeGraphSet;
use crate::msm::{
    CovarianceKind, CovarianceSpec, MsmModel, SharedBand, Trajectory, IMPOSSIBLE_LOGIT, TOL_RATIO,
};
use crate::nnet::{Activation, MaskedMlp, Mlp};
use crate::parallel::map_ordered;
use crate::rng;

pub const STAY_PROB: f64 = 0.9;
pub const INIT_MEAN_STD: f64 = 0.7;
pub const INIT_VAR: f64 = 0.01;
pub const CONSTANT_VAR: f64 = 0.01;
pub const HETERO_VAR_RANGE: (f64, f64) = (0.005, 0.08);
pub const HISTORY_SCALE_RANGE: (f64, f64) = (0.05, 0.1);
pub const S2_MAX_ATTEMPTS: usize = 1000;
/// Every generator edge must reach this mean absolute Jacobian, both over
/// `N(0, I)` probes and over rollouts of the finished generator.
pub const MIN_EDGE_STRENGTH: f64 = 0.1;
const EDGE_PROBES: usize = 256;
const EDGE_MAX_ATTEMPTS: usize = 200;
const ROLLOUT_SEQUENCES: usize = 16;
const ROLLOUT_MAX_ROUNDS: usize = 20;
/// Window-norm band inside which Overlap generators share one network.
pub const OVERLAP_BAND: (f64, f64) = (3.0, 5.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    Zero,
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub setting: String,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub num_regimes: usize,
    pub lag: usize,
    pub seq_len: usize,
    pub num_train: usize,
    pub num_eval: usize,
    pub noise: CovarianceKind,
    pub graph_edge_prob: f64,
    pub ablation: Ablation,
    pub transition_hidden: usize,
    pub emission_hidden: usize,
    pub emission_slope: f64,
    pub obs_noise_var: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            setting: "A".into(),
            latent_dim: 3,
            obs_dim: 10,
            num_regimes: 3,
            lag: 1,
            seq_len: 100,
            num_train: 10_000,
            num_eval: 1000,
            noise: CovarianceKind::Constant,
            graph_edge_prob: 0.5,
            ablation: Ablation::None,
            transition_hidden: 16,
            emission_hidden: 8,
            emission_slope: 0.2,
            obs_noise_var: 1e-4,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Benchmark settings `A` to `F`.
    pub fn preset(setting: &str) -> Result<Self> {
        use CovarianceKind::*;
        let (m, k, lag, noise) = match setting.to_ascii_uppercase().as_str() {
            "A" => (3, 3, 1, Constant),
            "B" => (3, 3, 1, Heterogeneous),
            "C" => (3, 3, 1, HistoryDependent),
            "D" => (5, 3, 2, HistoryDependent),
            "E" => (5, 5, 2, Heterogeneous),
            "F" => (5, 5, 5, Heterogeneous),
            other => return Err(Error::Config(format!("unknown setting {other:?}; expected A-F"))),
        };
        Ok(GeneratorConfig {
            setting: setting.to_ascii_uppercase(),
            latent_dim: m,
            num_regimes: k,
            lag,
            noise,
            ..Default::default()
        })
    }

    /// Ablation setup: `n = m = 5`, `K = 3`, constant noise.
    pub fn ablation(kind: Ablation, lag: usize) -> Self {
        GeneratorConfig {
            setting: format!("{}-M{lag}", if kind == Ablation::Overlap { "overlap" } else { "zero" }),
            latent_dim: 5,
            obs_dim: 5,
            num_regimes: 3,
            lag,
            noise: CovarianceKind::Constant,
            ablation: kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_regimes == 0 || self.lag == 0 {
            return Err(Error::Config("m, K and M must be positive".into()));
        }
        if self.obs_dim < self.latent_dim {
            return Err(Error::Config(format!("n = {} must be at least m = {}", self.obs_dim, self.latent_dim)));
        }
        if self.seq_len <= self.lag {
            return Err(Error::Config(format!("T = {} must exceed M = {}", self.seq_len, self.lag)));
        }
        if !(self.graph_edge_prob > 0.0 && self.graph_edge_prob <= 1.0) {
            return Err(Error::Config("graph_edge_prob must lie in (0, 1]".into()));
        }
        if !(self.obs_noise_var >= 0.0) {
            return Err(Error::Config("obs_noise_var must be non-negative".into()));
        }
        Activation::LeakyRelu(self.emission_slope).validate()
    }
}

/// Cyclic chain: stay with probability 0.9, else move to `k + 1 mod K`.
pub fn cyclic_transition_matrix(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let mut row = vec![0.0; k];
            if k == 1 {
                row[0] = 1.0;
            } else {
                row[i] = STAY_PROB;
                row[(i + 1) % k] += 1.0 - STAY_PROB;
            }
            row
        })
        .collect()
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Regimes `s_M, ..., s_T` (`T - M + 1` values): uniform start, cyclic 0.9/0.1 moves.
pub fn sample_regime_chain<R: Rng + ?Sized>(k: usize, t: usize, lag: usize, rng: &mut R) -> Vec<usize> {
    let q = cyclic_transition_matrix(k);
    let mut s = Vec::with_capacity(t + 1 - lag);
    s.push(rng.gen_range(0..k));
    for _ in lag..t {
        let prev = *s.last().unwrap();
        s.push(sample_categorical(&q[prev], rng));
    }
    s
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// A complete generative model: MSM prior, emission network and observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub prior: MsmModel,
    pub decoder: Mlp,
    pub obs_noise_var: f64,
    pub graphs: RegimeGraphSet,
}

/// One batch of sequences; regimes cover times `M..=T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceSet {
    pub latents: Vec<Trajectory>,
    pub regimes: Vec<Vec<usize>>,
    pub observations: Vec<Trajectory>,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

impl Generator {
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        self.decoder.forward_unchecked(z)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> (Trajectory, Vec<usize>, Trajectory) {
        let p = &self.prior;
        let (m, lag) = (p.dim, p.lag);
        let pi = p.pi();
        let q = p.q();
        let mut s = Vec::with_capacity(t + 1 - lag);
        s.push(sample_categorical(&pi, rng));
        let mut z = vec![0.0; t * m];
        let init_var = p.init_var(s[0]);
        for i in 0..m * lag {
            z[i] = p.init_means[s[0]][i] + init_var[i].sqrt() * gauss(rng);
        }
        let mut window = vec![0.0; m * lag];
        for step in lag..t {
            let k = sample_categorical(&q[*s.last().unwrap()], rng);
            s.push(k);
            for tau in 1..=lag {
                window[(tau - 1) * m..tau * m].copy_from_slice(&z[(step - tau) * m..(step - tau + 1) * m]);
            }
            let mean = p.transition_mean_unchecked(k, &window);
            let var = p.covariance.variance(k, &mean);
            for i in 0..m {
                z[step * m + i] = mean[i] + var[i].sqrt() * gauss(rng);
            }
        }
        let n = self.decoder.output_dim();
        let sd = self.obs_noise_var.sqrt();
        let mut x = Vec::with_capacity(t * n);
        for row in z.chunks(m) {
            let fx = self.decode(row);
            x.extend(fx.iter().map(|v| if sd > 0.0 { v + sd * gauss(rng) } else { *v }));
        }
        (Trajectory::new(z, m).unwrap(), s, Trajectory::new(x, n).unwrap())
    }

    pub fn sample_set(&self, count: usize, t: usize, seed: u64, role: &str, workers: usize) -> SequenceSet {
        let idx: Vec<usize> = (0..count).collect();
        let seqs = map_ordered(&idx, workers, |_, &i| {
            self.sample_sequence(t, &mut rng::stream(seed, &format!("{role}/sequence/{i}")))
        });
        let mut out = SequenceSet::default();
        for (z, s, x) in seqs {
            out.latents.push(z);
            out.regimes.push(s);
            out.observations.push(x);
        }
        out
    }
}

fn random_graph<R: Rng + ?Sized>(m: usize, lag: usize, p: f64, rng: &mut R) -> Vec<Vec<bool>> {
    (0..m)
        .map(|j| (0..m * lag).map(|c| c == j || rng.gen_bool(p)).collect())
        .collect()
}

fn weakest_edge(net: &MaskedMlp, graph: &[Vec<bool>], rng: &mut ChaCha8Rng) -> f64 {
    let d = graph[0].len();
    let mut sum = vec![vec![0.0; d]; graph.len()];
    for _ in 0..EDGE_PROBES {
        let x: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let jac = net.base.jacobian_from_trace(&net.base.trace_unchecked(&x));
        for (s, row) in sum.iter_mut().zip(&jac) {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b.abs();
            }
        }
    }
    let mut weakest = f64::INFINITY;
    for (j, row) in graph.iter().enumerate() {
        for (c, &edge) in row.iter().enumerate() {
            if edge {
                weakest = weakest.min(sum[j][c] / EDGE_PROBES as f64);
            }
        }
    }
    weakest
}

fn graph_net(cfg: &GeneratorConfig, graph: &[Vec<bool>], rng: &mut ChaCha8Rng) -> Result<MaskedMlp> {
    let (m, d) = (cfg.latent_dim, cfg.latent_dim * cfg.lag);
    let mut best: Option<(f64, MaskedMlp)> = None;
    for _ in 0..EDGE_MAX_ATTEMPTS {
        let net = MaskedMlp::locally_connected(d, cfg.transition_hidden, m, Activation::Cosine, |j, c| graph[j][c], rng)?;
        let strength = weakest_edge(&net, graph, rng);
        if strength >= MIN_EDGE_STRENGTH {
            return Ok(net);
        }
        if best.as_ref().map_or(true, |b| strength > b.0) {
            best = Some((strength, net));
        }
    }
    let (strength, net) = best.unwrap();
    log::warn!("no network reached edge strength {MIN_EDGE_STRENGTH}; using the strongest ({strength:.3})");
    Ok(net)
}

/// Weakest true edge per regime, averaged over rollout steps driven by that regime.
fn rollout_strength<R: Rng + ?Sized>(gen: &Generator, t: usize, rng: &mut R) -> Vec<f64> {
    let p = &gen.prior;
    let (m, lag, k) = (p.dim, p.lag, p.num_regimes);
    let mut sum = vec![vec![vec![0.0; m * lag]; m]; k];
    let mut count = vec![0usize; k];
    let mut window = vec![0.0; m * lag];
    for _ in 0..ROLLOUT_SEQUENCES {
        let (z, s, _) = gen.sample_sequence(t, rng);
        for step in lag..t {
            let r = s[step - lag + 1];
            for tau in 1..=lag {
                window[(tau - 1) * m..tau * m].copy_from_slice(z.row(step - tau));
            }
            let jac = p.transitions[r].base.jacobian_from_trace(&p.transitions[r].base.trace_unchecked(&window));
            for (acc, row) in sum[r].iter_mut().zip(&jac) {
                for (a, b) in acc.iter_mut().zip(row) {
                    *a += b.abs();
                }
            }
            count[r] += 1;
        }
    }
    (0..k)
        .map(|r| {
            let graph = gen.graphs.graphs[r].as_ref().unwrap();
            let mut weakest = f64::INFINITY;
            for (j, row) in graph.iter().enumerate() {
                for (c, &edge) in row.iter().enumerate() {
                    if edge {
                        let mean = if count[r] == 0 { 0.0 } else { sum[r][j][c] / count[r] as f64 };
                        weakest = weakest.min(mean);
                    }
                }
            }
            weakest
        })
        .collect()
}

fn s2_holds(vars: &[Vec<f64>]) -> bool {
    for a in 0..vars.len() {
        for b in a + 1..vars.len() {
            let r: Vec<f64> = vars[a].iter().zip(&vars[b]).map(|(x, y)| x / y).collect();
            let distinct = (0..r.len()).all(|i| (i + 1..r.len()).all(|j| (r[i] - r[j]).abs() > TOL_RATIO));
            if distinct {
                return true;
            }
        }
    }
    false
}

fn sample_covariance(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<CovarianceSpec> {
    let (m, k) = (cfg.latent_dim, cfg.num_regimes);
    Ok(match cfg.noise {
        CovarianceKind::Constant => CovarianceSpec::constant(&vec![CONSTANT_VAR; m]),
        CovarianceKind::Heterogeneous => {
            let (lo, hi) = HETERO_VAR_RANGE;
            let mut attempts = 0;
            loop {
                let vars: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.gen_range(lo..hi)).collect()).collect();
                attempts += 1;
                if k < 2 || s2_holds(&vars) {
                    break CovarianceSpec::heterogeneous(&vars);
                }
                if attempts >= S2_MAX_ATTEMPTS {
                    return Err(Error::Config(format!("no s2-compliant variances after {S2_MAX_ATTEMPTS} draws")));
                }
            }
        }
        CovarianceKind::HistoryDependent => {
            let (lo, hi) = HISTORY_SCALE_RANGE;
            CovarianceSpec::history_dependent(&(0..k).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>())
        }
    })
}

fn prior_shell(cfg: &GeneratorConfig, transitions: Vec<MaskedMlp>, covariance: CovarianceSpec, rng: &mut ChaCha8Rng) -> MsmModel {
    let (m, k, lag) = (cfg.latent_dim, cfg.num_regimes, cfg.lag);
    let q = cyclic_transition_matrix(k);
    let mut model = MsmModel {
        num_regimes: k,
        num_initial: k,
        lag,
        dim: m,
        pi_logits: vec![0.0; k],
        q_logits: q.iter().flat_map(|r| r.iter().map(|&p| if p > 0.0 { p.ln() } else { IMPOSSIBLE_LOGIT })).collect(),
        entry_logits: None,
        init_means: (0..k).map(|_| (0..m * lag).map(|_| INIT_MEAN_STD * gauss(rng)).collect()).collect(),
        init_var_raw: Vec::new(),
        transitions,
        covariance,
        shared_band: None,
    };
    model.init_var_raw = vec![Vec::new(); k];
    for a in 0..k {
        model.set_init_var(a, &vec![INIT_VAR; m * lag]);
    }
    model
}

fn emission(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Mlp> {
    Mlp::with_rng(
        &[cfg.latent_dim, cfg.emission_hidden, cfg.obs_dim],
        Activation::LeakyRelu(cfg.emission_slope),
        rng,
    )
}

/// Graph-constrained generator of settings A-F (and custom variants).
pub fn build_generator(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Generator> {
    cfg.validate()?;
    if cfg.ablation != Ablation::None {
        return build_ablation_generator(cfg, rng);
    }
    let (m, lag) = (cfg.latent_dim, cfg.lag);
    let mut graphs = Vec::with_capacity(cfg.num_regimes);
    let mut nets = Vec::with_capacity(cfg.num_regimes);
    for _ in 0..cfg.num_regimes {
        let g = random_graph(m, lag, cfg.graph_edge_prob, rng);
        nets.push(graph_net(cfg, &g, rng)?);
        graphs.push(Some(g));
    }
    let covariance = sample_covariance(cfg, rng)?;
    let prior = prior_shell(cfg, nets, covariance, rng);
    let decoder = emission(cfg, rng)?;
    prior.validate()?;
    let graphs = RegimeGraphSet::new(m, lag, graphs)?;
    let mut gen = Generator { prior, decoder, obs_noise_var: cfg.obs_noise_var, graphs };
    let t = cfg.seq_len.max(lag + 50);
    for round in 0..=ROLLOUT_MAX_ROUNDS {
        let weak: Vec<usize> = rollout_strength(&gen, t, rng)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w < MIN_EDGE_STRENGTH)
            .map(|(r, _)| r)
            .collect();
        if weak.is_empty() {
            break;
        }
        if round == ROLLOUT_MAX_ROUNDS {
            log::warn!("regimes {weak:?} keep edges below {MIN_EDGE_STRENGTH} on generated data");
            break;
        }
        for r in weak {
            let g = gen.graphs.graphs[r].clone().unwrap();
            gen.prior.transitions[r] = graph_net(cfg, &g, rng)?;
        }
    }
    Ok(gen)
}

/// Dense random cosine transitions; `Overlap` also shares one network across
/// regimes inside the window-norm band `[3, 5]`. Both kinds draw their regime
/// networks from the same stream, so matched seeds differ only by the band.
pub fn build_ablation_generator(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Generator> {
    cfg.validate()?;
    if cfg.ablation == Ablation::None {
        return Err(Error::Config("ablation generator needs ablation = zero or overlap".into()));
    }
    let (m, lag) = (cfg.latent_dim, cfg.lag);
    let dims = [m * lag, cfg.transition_hidden, m];
    let nets = (0..cfg.num_regimes)
        .map(|_| Mlp::with_rng(&dims, Activation::Cosine, rng).map(MaskedMlp::dense))
        .collect::<Result<Vec<_>>>()?;
    let covariance = sample_covariance(cfg, rng)?;
    let mut prior = prior_shell(cfg, nets, covariance, rng);
    let decoder = emission(cfg, rng)?;
    let shared = Mlp::with_rng(&dims, Activation::Cosine, rng)?;
    if cfg.ablation == Ablation::Overlap {
        prior.shared_band = Some(SharedBand { net: shared, lo: OVERLAP_BAND.0, hi: OVERLAP_BAND.1 });
    }
    let full = vec![vec![true; m * lag]; m];
    let graphs = RegimeGraphSet::new(m, lag, vec![Some(full); cfg.num_regimes])?;
    Ok(Generator { prior, decoder, obs_noise_var: cfg.obs_noise_var, graphs })
}

/// Everything needed to score a recovered model.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub generator: Generator,
    pub train: SequenceSet,
    pub eval: SequenceSet,
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<GroundTruth> {
    generate_dataset_with_workers(cfg, 1)
}

/// Bit-identical to [`generate_dataset`] for every worker count.
pub fn generate_dataset_with_workers(cfg: &GeneratorConfig, workers: usize) -> Result<GroundTruth> {
    let mut build_rng = rng::stream(cfg.seed, "generator");
    let generator = build_generator(cfg, &mut build_rng)?;
    let train = generator.sample_set(cfg.num_train, cfg.seq_len, cfg.seed, "train", workers);
    let eval = generator.sample_set(cfg.num_eval, cfg.seq_len, cfg.seed, "eval", workers);
    Ok(GroundTruth { config: cfg.clone(), generator, train, eval })
}
