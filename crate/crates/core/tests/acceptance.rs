//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed.
//! `ACCEPTANCE_ONLY=5,6` restricts the run to the listed criteria. Failing
//! criteria are reported but only fail the process with `ACCEPTANCE_STRICT=1`.

mod common;

use std::time::Instant;

use common::metric_cases;
use common::{
    kind_of, msm_fd_errors, pushforward, quadrature_instance, quadrature_log_evidence, random_model, random_obs, random_traj,
    sds_fd_errors, small_sds,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switching_core::io::{Checkpoint, CheckpointModel, Container, Role, TrainingMetadata};
use switching_core::metrics::{causal_f1, evaluate_msm, evaluate_sds, EvalOptions, MetricReport};
use switching_core::msm::{
    brute_force_log_likelihood, enumerate_paths, fit_msm, forward_backward, log_likelihood, regime_graphs, CovarianceKind,
    MsmArchitecture, MsmModel, OptimizerConfig, Trajectory,
};
use switching_core::sds::{draw_noise, elbo_estimate, train_sds, SdsArchitecture, SdsModel, StageConfig, TrainSchedule};
use switching_core::selection::{elbow_select, sweep, GridSpec, SelectionGrid, Trainer, ELBOW_RHO};
use switching_core::synthgen::{generate_dataset, Ablation, GeneratorConfig, GroundTruth};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_ll, mut worst_post) = (0.0f64, 0.0f64);
    for case in 0..200u64 {
        let k = rng.gen_range(1..=3);
        let k0 = rng.gen_range(1..=3);
        let lag = rng.gen_range(1..=2);
        let m = rng.gen_range(1..=3);
        let t = rng.gen_range(lag + 1..=6);
        let model = random_model(case + 10_000, k, k0, lag, m, kind_of(case as usize));
        let z = random_traj(case + 10_000, t, m);
        worst_ll = worst_ll.max((log_likelihood(&model, &z).unwrap() - brute_force_log_likelihood(&model, &z).unwrap()).abs());
        let post = forward_backward(&model, &z).unwrap();
        let e = enumerate_paths(&model, &z).unwrap();
        for (a, b) in post.gamma.iter().flatten().zip(e.gamma.iter().flatten()) {
            worst_post = worst_post.max((a - b).abs());
        }
        for (a, b) in post.xi.iter().flatten().flatten().zip(e.xi.iter().flatten().flatten()) {
            worst_post = worst_post.max((a - b).abs());
        }
    }
    outcome(
        worst_ll < 1e-8 && worst_post < 1e-8,
        format!("200 instances, max |loglik diff| {worst_ll:.2e}, max posterior diff {worst_post:.2e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let (mut prior_worst, mut elbo_worst) = (0.0f64, 0.0f64);
    for case in 0..50u64 {
        let lag = 1 + (case % 2) as usize;
        let k = 1 + (case % 3) as usize;
        let k0 = if case % 5 == 4 { 1 + (k % 3) } else { k };
        let model = random_model(case + 20_000, k, k0, lag, 2, kind_of(case as usize));
        let z = random_traj(case + 20_000, 6, 2);
        let (p, i) = msm_fd_errors(&model, &z, 1e-5);
        prior_worst = prior_worst.max(p).max(i);

        let sds = small_sds(case + 30_000, 2, lag, 2, 3, 5, kind_of(case as usize));
        let x = random_obs(case + 30_000, 5, 3);
        let noise = draw_noise(&sds, 5, 1 + (case % 2) as usize, &mut ChaCha8Rng::seed_from_u64(case));
        let eta = if case % 3 == 0 { 0.0 } else { 0.05 };
        elbo_worst = sds_fd_errors(&sds, &x, &noise, eta, 1e-6).into_iter().fold(elbo_worst, f64::max);
    }
    outcome(
        prior_worst < 1e-4 && elbo_worst < 1e-3,
        format!("50 models, worst rel. error prior {prior_worst:.2e} (< 1e-4), ELBO {elbo_worst:.2e} (< 1e-3)"),
    )
}

fn affine_closure() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case + 40_000);
        let m = rng.gen_range(1..=3);
        let lag = rng.gen_range(1..=2);
        let kind = if case % 2 == 0 { CovarianceKind::Heterogeneous } else { CovarianceKind::Constant };
        let model = random_model(case + 40_000, 2, 2, lag, m, kind);
        let z = random_traj(case + 40_000, 6, m);
        let d: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 }).collect();
        let mut p: Vec<usize> = (0..m).collect();
        p.shuffle(&mut rng);
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let moved = pushforward(&model, &d, &p, &b);
        let rows: Vec<Vec<f64>> = (0..z.len()).map(|t| (0..m).map(|i| d[i] * z.row(t)[p[i]] + b[i]).collect()).collect();
        let log_det: f64 = d.iter().map(|v| v.abs().ln()).sum();
        let lhs = log_likelihood(&moved, &Trajectory::from_rows(&rows).unwrap()).unwrap();
        let rhs = log_likelihood(&model, &z).unwrap() - z.len() as f64 * log_det;
        worst = worst.max((lhs - rhs).abs());
    }
    outcome(worst < 1e-8, format!("50 transforms, max |loglik shift - log det| {worst:.2e}"))
}

fn elbo_bound() -> Outcome {
    let draws = 1000;
    let mut worst_margin = f64::NEG_INFINITY;
    for case in 0..20u64 {
        let model = quadrature_instance(case + 50_000);
        let x = random_obs(case + 50_000, 3, 1);
        let exact = quadrature_log_evidence(&model, &x, 8.0, 1601);
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let e: Vec<f64> = (0..draws).map(|_| elbo_estimate(&model, &x, 1, 0.0, &mut rng).unwrap().elbo).collect();
        let mu = mean(&e);
        let se = (e.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt() / (draws as f64).sqrt();
        worst_margin = worst_margin.max(mu - exact - 3.0 * se);
    }
    outcome(worst_margin <= 0.0, format!("20 instances, max (ELBO - log p(x) - 3 SE) = {worst_margin:.3e}"))
}

fn desk_schedule(seed: u64) -> TrainSchedule {
    let st = |epochs, learning_rate| StageConfig { epochs, learning_rate, step_decay: None };
    TrainSchedule {
        init_msm: st(20, 7e-3),
        pretrain: st(20, 5e-4),
        warmup: st(5, 5e-4),
        final_phase: st(60, 2e-3),
        restarts: 1,
        seed,
        ..Default::default()
    }
}

fn desk_dataset(setting: &str, seed: u64) -> GroundTruth {
    let cfg = GeneratorConfig { seed, num_train: 2000, num_eval: 1000, ..GeneratorConfig::preset(setting).unwrap() };
    generate_dataset(&cfg).unwrap()
}

fn fit_sds(gt: &GroundTruth, seed: u64) -> MetricReport {
    let cfg = &gt.config;
    let prior = MsmArchitecture::new(cfg.num_regimes, cfg.lag, cfg.latent_dim).with_covariance(cfg.noise);
    let arch = SdsArchitecture::new(prior, cfg.obs_dim);
    let init = SdsModel::random(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let rep = train_sds(&init, &gt.train.observations, &desk_schedule(seed)).unwrap();
    evaluate_sds(gt, &rep.model, &EvalOptions::default()).unwrap()
}

struct SdsRuns {
    a: Vec<MetricReport>,
    b: Vec<MetricReport>,
    c: Vec<MetricReport>,
    self_f1: Vec<f64>,
}

fn sds_runs(need_c: bool) -> SdsRuns {
    let mut runs = SdsRuns { a: Vec::new(), b: Vec::new(), c: Vec::new(), self_f1: Vec::new() };
    let settings: &[&str] = if need_c { &["A", "B", "C"] } else { &["A", "B"] };
    for &setting in settings {
        for seed in SEEDS {
            let start = Instant::now();
            let gt = desk_dataset(setting, seed);
            let id: Vec<usize> = (0..gt.config.num_regimes).collect();
            let nodes: Vec<usize> = (0..gt.config.latent_dim).collect();
            let own = regime_graphs(&gt.generator.prior, &gt.eval.latents, 0.05).unwrap();
            runs.self_f1.push(causal_f1(&gt.generator.graphs, &own, &id, &nodes).unwrap().f1);
            let r = fit_sds(&gt, seed);
            println!(
                "    {setting} seed {seed}: regime F1 {:.3}, weak MCC {:.3}, strong MCC {:.3}, causal F1 {:.3} ({:.0} s)",
                r.regime_f1,
                r.weak_mcc.unwrap_or(f64::NAN),
                r.strong_mcc.unwrap_or(f64::NAN),
                r.causal_f1.unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            match setting {
                "A" => runs.a.push(r),
                "B" => runs.b.push(r),
                _ => runs.c.push(r),
            }
        }
    }
    runs
}

fn synthetic_recovery(runs: &SdsRuns) -> Outcome {
    let get = |v: &[MetricReport], f: fn(&MetricReport) -> Option<f64>| v.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let a_f1 = mean(&runs.a.iter().map(|r| r.regime_f1).collect::<Vec<_>>());
    let a_weak = mean(&get(&runs.a, |r| r.weak_mcc));
    let a_strong = get(&runs.a, |r| r.strong_mcc);
    let b_strong = get(&runs.b, |r| r.strong_mcc);
    let b_mean = mean(&b_strong);
    let ordered = a_strong.iter().zip(&b_strong).all(|(a, b)| b > a);
    outcome(
        a_f1 >= 0.90 && a_weak >= 0.95 && b_mean >= 0.85 && ordered,
        format!(
            "A: regime F1 {a_f1:.3} (>= 0.90), weak MCC {a_weak:.3} (>= 0.95); B: strong MCC {b_mean:.3} (>= 0.85), \
             B > A on every seed: {ordered} (A {a_strong:.3?}, B {b_strong:.3?})"
        ),
    )
}

fn causal_recovery(runs: &SdsRuns) -> Outcome {
    let f = |v: &[MetricReport]| mean(&v.iter().map(|r| r.causal_f1.unwrap_or(0.0)).collect::<Vec<_>>());
    let (b, c) = (f(&runs.b), f(&runs.c));
    let exact = runs.self_f1.iter().all(|&v| v == 1.0);
    outcome(
        b >= 0.80 && c >= 0.80 && exact,
        format!("causal F1 B {b:.3}, C {c:.3} (>= 0.80); generator self-evaluation exactly 1.0: {exact}"),
    )
}

/// True value is the argmax, or within the elbow threshold of the best value
/// with every smaller candidate strictly worse.
fn peaks_or_plateaus(values: &[usize], curve: &[f64], truth: usize) -> bool {
    let i = values.iter().position(|&v| v == truth).unwrap();
    let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = curve.iter().cloned().fold(f64::INFINITY, f64::min);
    let near_best = max - curve[i] <= ELBOW_RHO * (max - min);
    near_best && curve[..i].iter().all(|&y| y < curve[i])
}

fn model_selection() -> Outcome {
    let (k_values, m_values) = ([1, 2, 3, 4, 5], [1, 2, 3, 4]);
    let mut peak_ok = 0;
    let mut elbow_ok = 0;
    for seed in SEEDS {
        let cfg = GeneratorConfig { seed, num_train: 1000, num_eval: 200, ..GeneratorConfig::preset("D").unwrap() };
        let gt = generate_dataset(&cfg).unwrap();
        let trainer = Trainer::Msm {
            arch: MsmArchitecture::new(1, 1, cfg.latent_dim).with_covariance(cfg.noise),
            optimizer: OptimizerConfig { epochs: 20, batch_size: 20, restarts: 1, ..Default::default() },
        };
        let spec = GridSpec::cross(&k_values, cfg.lag, &m_values, cfg.num_regimes, &[seed]);
        let grid: SelectionGrid = sweep(&gt.train.latents, &gt.eval.latents, &spec, &trainer, 1).unwrap();
        let kc = grid.k_curve(cfg.lag, seed).unwrap();
        let mc = grid.m_curve(cfg.num_regimes, seed).unwrap();
        if peaks_or_plateaus(&k_values, &kc, 3) && peaks_or_plateaus(&m_values, &mc, 2) {
            peak_ok += 1;
        }
        let k = k_values[elbow_select(&kc, ELBOW_RHO).unwrap().index];
        let m = m_values[elbow_select(&mc, ELBOW_RHO).unwrap().index];
        if (k, m) == (3, 2) {
            elbow_ok += 1;
        }
        println!("    seed {seed}: K curve {kc:.2?}, M curve {mc:.2?}, elbow (K, M) = ({k}, {m})");
    }
    outcome(
        peak_ok >= 2 && elbow_ok >= 2,
        format!("peak/plateau at truth in {peak_ok}/3 seeds, elbow returns (3, 2) in {elbow_ok}/3 seeds"),
    )
}

fn ablation_r2(kind: Ablation, lag: usize, seed: u64) -> f64 {
    let cfg = GeneratorConfig { seed, num_train: 1000, num_eval: 200, ..GeneratorConfig::ablation(kind, lag) };
    let gt = generate_dataset(&cfg).unwrap();
    let arch = MsmArchitecture::new(cfg.num_regimes, lag, cfg.latent_dim).with_covariance(cfg.noise);
    let init = MsmModel::random(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let opt = OptimizerConfig { epochs: 60, batch_size: 20, restarts: 3, seed, ..Default::default() };
    let fit = fit_msm(&init, &gt.train.latents, &opt).unwrap();
    let r = evaluate_msm(&gt, &fit.model, &EvalOptions::default()).unwrap();
    println!("      {} seed {seed}: regime F1 {:.3}, R2 {:.3}", cfg.setting, r.regime_f1, r.r2.unwrap_or(f64::NAN));
    r.r2.unwrap_or(f64::NAN)
}

fn ablation_direction() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for lag in [1, 3] {
        let zero: Vec<f64> = SEEDS.iter().map(|&s| ablation_r2(Ablation::Zero, lag, s)).collect();
        let overlap: Vec<f64> = SEEDS.iter().map(|&s| ablation_r2(Ablation::Overlap, lag, s)).collect();
        println!("    M={lag}: Zero R2 {zero:.3?}, Overlap R2 {overlap:.3?}");
        let (z, o) = (mean(&zero), mean(&overlap));
        ok &= z >= o && o > 0.5;
        parts.push(format!("M={lag}: Zero {z:.3} vs Overlap {o:.3}"));
    }
    outcome(ok, format!("{} (Zero >= Overlap, Overlap > 0.5)", parts.join("; ")))
}

fn metric_properties() -> Outcome {
    let cases: [(&str, fn(u64) -> Result<(), String>); 5] = [
        ("regime F1 relabelling", metric_cases::regime_f1_ignores_relabelling_of_predictions),
        ("assignment optimality", metric_cases::assignment_matches_exhaustive_search),
        ("strong MCC invariance", metric_cases::strong_mcc_is_one_under_scaling_and_permutation),
        ("weak MCC invariance", metric_cases::weak_mcc_is_one_under_affine_maps),
        ("causal F1 equivariance", metric_cases::causal_f1_is_equivariant_under_node_permutation),
    ];
    let mut failures = Vec::new();
    for (name, f) in cases {
        let bad = (0..1000u64).filter(|&s| f(s.wrapping_mul(0x9E37_79B9_7F4A_7C15)).is_err()).count();
        if bad > 0 {
            failures.push(format!("{name}: {bad} failures"));
        }
    }
    let pass = failures.is_empty();
    outcome(pass, if pass { "5 properties x 1000 cases".into() } else { failures.join(", ") })
}

fn format_round_trips() -> Outcome {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(60_000);
    for case in 0..20u64 {
        let msm = random_model(case + 60_000, 3, 2, 2, 2, kind_of(case as usize));
        let sds = small_sds(case + 61_000, 2, 1, 2, 3, 5, kind_of(case as usize));
        for model in [CheckpointModel::Msm(msm.clone()), CheckpointModel::Sds(sds)] {
            let c = Checkpoint::new(model, TrainingMetadata { stage: "final".into(), seed: case, config_sha256: None });
            let text = c.to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap();
            ok &= back == c && back.to_json().unwrap() == text;
        }
        let ts: Vec<Trajectory> = (0..3).map(|i| random_traj(case * 7 + i, 5, 2)).collect();
        let cont = Container::from_trajectories(&ts, Role::Latent, case, "acceptance").unwrap();
        let bytes = cont.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        ok &= back.to_bytes().unwrap() == bytes && back.trajectories().unwrap() == ts;
        let mut corrupt = bytes.clone();
        let at = rng.gen_range(bytes.len() - 8 * 30..bytes.len());
        corrupt[at] ^= 1 << rng.gen_range(0..8);
        ok &= Container::from_bytes(&corrupt).is_err();
    }
    let cfg = GeneratorConfig { num_train: 4, num_eval: 2, seq_len: 20, ..GeneratorConfig::preset("B").unwrap() };
    let (a, b) = (generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    ok &= a.train == b.train && a.eval == b.eval && a.generator == b.generator;

    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_switching");
    let run = |out: &str| {
        std::process::Command::new(bin)
            .args(["generate", "--setting", "C", "--num-train", "5", "--num-eval", "3", "--seed", "9", "--out", out])
            .current_dir(dir.path())
            .output()
            .unwrap()
            .status
            .success()
    };
    ok &= run("x") && run("y");
    for entry in std::fs::read_dir(dir.path().join("x")).unwrap() {
        let name = entry.unwrap().file_name();
        ok &= std::fs::read(dir.path().join("x").join(&name)).unwrap() == std::fs::read(dir.path().join("y").join(&name)).unwrap();
    }
    outcome(ok, "checkpoints, containers, generator and CLI output are bit-identical across runs".into())
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |o| o.contains(&i));
    let start = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |i: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(i) {
            let t = Instant::now();
            let o = f();
            println!(
                "criterion {i:>2} {}: {} ({}; {:.1} s)",
                if o.pass { "PASS" } else { "FAIL" },
                name,
                o.detail,
                t.elapsed().as_secs_f64()
            );
            results.push((i, o));
        }
    };
    record(1, "oracle equivalence", &mut oracle_equivalence);
    record(2, "gradient correctness", &mut gradient_correctness);
    record(3, "affine closure", &mut affine_closure);
    record(4, "ELBO bound", &mut elbo_bound);
    record(9, "metric-suite properties", &mut metric_properties);
    record(10, "format round-trips and CLI determinism", &mut format_round_trips);
    record(7, "model selection", &mut model_selection);
    record(8, "ablation direction", &mut ablation_direction);
    if wanted(5) || wanted(6) {
        let runs = sds_runs(wanted(6));
        record(5, "synthetic recovery", &mut || synthetic_recovery(&runs));
        record(6, "causal recovery", &mut || causal_recovery(&runs));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
