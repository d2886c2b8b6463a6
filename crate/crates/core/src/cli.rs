//! The `switching` command line: generate, train, evaluate, select, validate.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{
    load_split, load_truth, save_ground_truth, write_atomic, write_json, Checkpoint, CheckpointModel, Container, Role,
    TrainingMetadata,
};
use crate::metrics::{evaluate_msm, evaluate_sds, reports_to_csv, EvalOptions, MetricReport};
use crate::msm::{
    fit_msm, log_likelihood, validate_assumptions, CovarianceKind, MsmArchitecture, MsmModel, OptimizerConfig, ProbeSpec,
    Trajectory,
};
use crate::nnet::Activation;
use crate::rng;
use crate::sds::{mean_objective, train_sds, SdsArchitecture, SdsModel, TrainSchedule};
use crate::selection::{elbow_select, sweep, GridSpec, SelectionGrid, Trainer, ELBOW_RHO};
use crate::synthgen::{generate_dataset_with_workers, GeneratorConfig, GroundTruth};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "switching", version, about = "Identifiable Markov switching models and switching dynamical systems")]
pub struct Cli {
    /// Top-level seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Msm,
    Sds,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic benchmark into a dataset directory.
    Generate(GenerateArgs),
    /// Fit a model and write a checkpoint plus a training report.
    Train(TrainArgs),
    /// Score a checkpoint on the evaluation split.
    Evaluate(EvaluateArgs),
    /// Sweep K and M and pick both with the elbow rule.
    Select(SelectArgs),
    /// Check the identifiability assumptions of a checkpoint.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Preset A-F; ignored when --config is given.
    #[arg(long, default_value = "A")]
    pub setting: String,
    #[arg(long)]
    pub num_train: Option<usize>,
    #[arg(long)]
    pub num_eval: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub kind: ModelKind,
    /// Dataset directory or a single container file.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(value_enum)]
    pub kind: ModelKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub m: Vec<usize>,
    /// Lag held fixed while K varies; defaults to the generating lag.
    #[arg(long)]
    pub m0: Option<usize>,
    /// Regime count held fixed while M varies; defaults to the generating count.
    #[arg(long)]
    pub k0: Option<usize>,
    /// Dataset seeds to repeat the sweep with; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub probes: Option<usize>,
}

/// Training configuration; unset regime count and lag fall back to the
/// dataset's `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_regimes: Option<usize>,
    pub lag: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub covariance: CovarianceKind,
    pub optimizer: OptimizerConfig,
    pub schedule: TrainSchedule,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = MsmArchitecture::new(1, 1, 1);
        TrainConfig {
            num_regimes: None,
            lag: None,
            hidden: arch.hidden,
            activation: arch.activation,
            covariance: arch.covariance,
            optimizer: OptimizerConfig::default(),
            schedule: TrainSchedule::default(),
            encoder_hidden: vec![128],
            decoder_hidden: vec![128],
            leaky_slope: 0.2,
        }
    }
}

impl TrainConfig {
    fn prior_arch(&self, k: usize, m: usize, dim: usize) -> MsmArchitecture {
        MsmArchitecture {
            hidden: self.hidden.clone(),
            activation: self.activation,
            ..MsmArchitecture::new(k, m, dim).with_covariance(self.covariance)
        }
    }

    fn sds_arch(&self, k: usize, m: usize, latent_dim: usize, obs_dim: usize) -> SdsArchitecture {
        SdsArchitecture {
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            leaky_slope: self.leaky_slope,
            ..SdsArchitecture::new(self.prior_arch(k, m, latent_dim), obs_dim)
        }
    }
}

/// Output of `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean log-likelihood (MSM) or ELBO (SDS) on the evaluation split.
    pub heldout_objective: f64,
    pub report: Option<MetricReport>,
    pub flags: Vec<String>,
}

/// Per-seed outcome of `select`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub seed: u64,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub flags: Vec<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) | Error::Numeric(_) => EXIT_TRAINING,
        _ => EXIT_INPUT,
    }
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Evaluate(a) => cmd_evaluate(&cli, a),
        Command::Select(a) => cmd_select(&cli, a),
        Command::Validate(a) => cmd_validate(&cli, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Option<String>)> {
    match path {
        None => Ok((T::default(), None)),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok((value, Some(hex::encode(Sha256::digest(text.as_bytes())))))
        }
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

pub fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => read_config::<GeneratorConfig>(Some(p))?.0,
        None => GeneratorConfig::preset(&a.setting)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.num_train {
        cfg.num_train = n;
    }
    if let Some(n) = a.num_eval {
        cfg.num_eval = n;
    }
    let gt = generate_dataset_with_workers(&cfg, cli.workers)?;
    let dir = out_path(cli, "data");
    save_ground_truth(&dir, &gt)?;
    println!(
        "wrote setting {} ({} train, {} eval sequences of length {}) to {}",
        cfg.setting,
        cfg.num_train,
        cfg.num_eval,
        cfg.seq_len,
        dir.display()
    );
    Ok(EXIT_OK)
}

/// Training sequences for `kind`: a container file is used as is, a directory
/// supplies its train split.
fn load_training(path: &Path, kind: ModelKind, split: &str) -> Result<Vec<Trajectory>> {
    let want = match kind {
        ModelKind::Msm => Role::Latent,
        ModelKind::Sds => Role::Observed,
    };
    if !path.exists() {
        return Err(Error::Config(format!("data path {} does not exist", path.display())));
    }
    if path.is_file() {
        let c = Container::load(path)?;
        if c.header.role != want {
            return Err(Error::Config(format!("{} holds {:?} data, {kind:?} needs {want:?}", path.display(), c.header.role)));
        }
        return c.trajectories();
    }
    let set = load_split(path, split)?;
    let data = match kind {
        ModelKind::Msm => set.latents,
        ModelKind::Sds => set.observations,
    };
    if data.is_empty() {
        return Err(Error::Config(format!("no {want:?} {split} data in {}", path.display())));
    }
    Ok(data)
}

fn truth_dims(data: &Path) -> Result<Option<(usize, usize, usize)>> {
    if !data.is_dir() {
        return Ok(None);
    }
    Ok(load_truth(data)?.map(|t| (t.config.num_regimes, t.config.lag, t.config.latent_dim)))
}

fn resolve_km(cfg: &TrainConfig, data: &Path) -> Result<(usize, usize, Option<usize>)> {
    let truth = truth_dims(data)?;
    let k = cfg.num_regimes.or(truth.map(|t| t.0));
    let m = cfg.lag.or(truth.map(|t| t.1));
    match (k, m) {
        (Some(k), Some(m)) => Ok((k, m, truth.map(|t| t.2))),
        _ => Err(Error::Config("num_regimes and lag must be set when the data has no truth.json".into())),
    }
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let (cfg, config_sha256): (TrainConfig, _) = read_config(cli.config.as_deref())?;
    let data = load_training(&a.data, a.kind, "train")?;
    let (k, m, latent_dim) = resolve_km(&cfg, &a.data)?;
    let seed = cli.seed.unwrap_or(match a.kind {
        ModelKind::Msm => cfg.optimizer.seed,
        ModelKind::Sds => cfg.schedule.seed,
    });
    let mut init = rng::stream(seed, "cli/init");
    let out = out_path(cli, "checkpoint.json");
    let (model, report_json, stage) = match a.kind {
        ModelKind::Msm => {
            let model = MsmModel::random(&cfg.prior_arch(k, m, data[0].dim()), &mut init)?;
            let opt = OptimizerConfig { seed, workers: cli.workers, ..cfg.optimizer.clone() };
            let rep = fit_msm(&model, &data, &opt)?;
            for (e, ll) in rep.restarts[rep.best_restart].epoch_log_likelihood.iter().enumerate() {
                println!("epoch {e} log_likelihood {ll}");
            }
            (CheckpointModel::Msm(rep.model.clone()), rep.to_json()?, "msm")
        }
        ModelKind::Sds => {
            let latent_dim = cfg.schedule.pca_dims.or(latent_dim).ok_or_else(|| {
                Error::Config("latent dimension unknown: set schedule.pca_dims or provide truth.json".into())
            })?;
            let model = SdsModel::random(&cfg.sds_arch(k, m, latent_dim, data[0].dim()), &mut init)?;
            let sched = TrainSchedule { seed, workers: cli.workers, ..cfg.schedule.clone() };
            let rep = train_sds(&model, &data, &sched)?;
            let names = ["init_msm", "pretrain", "warmup", "final"];
            for (name, st) in names.iter().zip(&rep.restarts[rep.best_restart].stages) {
                for (e, v) in st.epoch_objective.iter().enumerate() {
                    println!("{name} epoch {e} objective {v}");
                }
            }
            (CheckpointModel::Sds(rep.model.clone()), rep.to_json()?, "final")
        }
    };
    let ckpt = Checkpoint::new(model, TrainingMetadata { stage: stage.into(), seed, config_sha256 });
    ckpt.save(&out)?;
    write_atomic(&out.with_extension("report.json"), report_json.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

fn heldout_objective(model: &CheckpointModel, data: &[Trajectory], seed: u64, workers: usize) -> Result<f64> {
    match model {
        CheckpointModel::Msm(m) => {
            let mut total = 0.0;
            for z in data {
                total += log_likelihood(m, z)?;
            }
            Ok(total / data.len() as f64)
        }
        CheckpointModel::Sds(s) => Ok(mean_objective(s, data, 1, 0.0, rng::derive_seed(seed, "cli/evaluate"), workers)?.elbo),
    }
}

pub fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let kind = match ckpt.model {
        CheckpointModel::Msm(_) => ModelKind::Msm,
        CheckpointModel::Sds(_) => ModelKind::Sds,
    };
    let data = load_training(&a.data, kind, "eval")?;
    let want = match &ckpt.model {
        CheckpointModel::Msm(m) => m.dim,
        CheckpointModel::Sds(s) => s.obs_dim(),
    };
    if let Some(x) = data.iter().find(|x| x.dim() != want) {
        return Err(Error::shape(format!("data dimension {} does not match the checkpoint's {want}", x.dim())));
    }
    let objective = heldout_objective(&ckpt.model, &data, cli.seed.unwrap_or(0), cli.workers)?;
    let mut flags = Vec::new();
    let truth = if a.data.is_dir() { load_truth(&a.data)? } else { None };
    let report = match truth {
        None => {
            flags.push("ground truth absent: recovery metrics skipped".to_string());
            None
        }
        Some(t) => {
            let gt = GroundTruth { config: t.config, generator: t.generator, train: Default::default(), eval: load_split(&a.data, "eval")? };
            let opts = EvalOptions::default();
            Some(match &ckpt.model {
                CheckpointModel::Msm(m) => evaluate_msm(&gt, m, &opts)?,
                CheckpointModel::Sds(s) => evaluate_sds(&gt, s, &opts)?,
            })
        }
    };
    if let Some(r) = &report {
        print!("{}", reports_to_csv(std::slice::from_ref(r)));
    }
    println!("heldout_objective {objective}");
    for f in &flags {
        println!("flag: {f}");
    }
    write_json(&out_path(cli, "evaluation.json"), &Evaluation { heldout_objective: objective, report, flags })?;
    Ok(EXIT_OK)
}

/// Elbow choice on curves of at least 3 points, the best point otherwise.
fn choose(values: &[usize], curve: Option<Vec<f64>>, flags: &mut Vec<String>, what: &str) -> Option<usize> {
    let Some(curve) = curve else {
        flags.push(format!("{what} curve has flagged cells"));
        return None;
    };
    if curve.len() < 3 {
        let best = (0..curve.len()).fold(0, |b, i| if curve[i] > curve[b] { i } else { b });
        return Some(values[best]);
    }
    match elbow_select(&curve, ELBOW_RHO) {
        Ok(c) => {
            if c.flat {
                flags.push(format!("{what} curve is flat"));
            }
            Some(values[c.index])
        }
        Err(e) => {
            flags.push(format!("{what}: {e}"));
            None
        }
    }
}

/// Elbow choices of `K` (at lag `m0`) and `M` (at `k0`) for every seed in the grid.
pub fn select_from_grid(grid: &SelectionGrid, k0: usize, m0: usize, seeds: &[u64]) -> Vec<Selection> {
    seeds
        .iter()
        .map(|&seed| {
            let mut flags = Vec::new();
            let k = choose(&grid.k_values, grid.k_curve(m0, seed), &mut flags, "K");
            let m = choose(&grid.m_values, grid.m_curve(k0, seed), &mut flags, "M");
            Selection { seed, k, m, flags }
        })
        .collect()
}

pub fn cmd_select(cli: &Cli, a: &SelectArgs) -> Result<i32> {
    if a.k.is_empty() || a.m.is_empty() {
        return Err(Error::Config("selection grid is empty".into()));
    }
    let (cfg, _): (TrainConfig, _) = read_config(cli.config.as_deref())?;
    let train = load_training(&a.data, a.kind, "train")?;
    let heldout = load_training(&a.data, a.kind, "eval")?;
    let truth = truth_dims(&a.data)?;
    let k0 = a.k0.or(truth.map(|t| t.0)).ok_or_else(|| Error::Config("--k0 is required without truth.json".into()))?;
    let m0 = a.m0.or(truth.map(|t| t.1)).ok_or_else(|| Error::Config("--m0 is required without truth.json".into()))?;
    let seeds = if a.seeds.is_empty() { vec![cli.seed.unwrap_or(0)] } else { a.seeds.clone() };
    let trainer = match a.kind {
        ModelKind::Msm => Trainer::Msm { arch: cfg.prior_arch(1, 1, train[0].dim()), optimizer: cfg.optimizer.clone() },
        ModelKind::Sds => {
            let latent_dim = cfg.schedule.pca_dims.or(truth.map(|t| t.2)).ok_or_else(|| {
                Error::Config("latent dimension unknown: set schedule.pca_dims or provide truth.json".into())
            })?;
            Trainer::Sds { arch: cfg.sds_arch(1, 1, latent_dim, train[0].dim()), schedule: cfg.schedule.clone() }
        }
    };
    let spec = GridSpec::cross(&a.k, m0, &a.m, k0, &seeds);
    let grid = sweep(&train, &heldout, &spec, &trainer, cli.workers)?;
    let mut csv = Vec::new();
    grid.write_csv(&mut csv)?;
    write_atomic(&out_path(cli, "selection.csv"), &csv)?;
    for s in select_from_grid(&grid, k0, m0, &seeds) {
        let show = |v: Option<usize>| v.map_or("?".to_string(), |x| x.to_string());
        println!("seed {}: K={} M={}", s.seed, show(s.k), show(s.m));
        for f in &s.flags {
            println!("flag: {f}");
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_validate(cli: &Cli, a: &ValidateArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (mut probe, _): (ProbeSpec, _) = read_config(cli.config.as_deref())?;
    if let Some(n) = a.probes {
        probe.num_samples = n;
    }
    if let Some(s) = cli.seed {
        probe.seed = s;
    }
    let rep = validate_assumptions(ckpt.model.prior(), &probe);
    println!("{}", serde_json::to_string_pretty(&rep)?);
    if let Some(out) = &cli.out {
        write_json(out, &rep)?;
    }
    Ok(if rep.passed() { EXIT_OK } else { EXIT_VALIDATION })
}
