//! Randomised metric invariants, one seeded case per call.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switching_core::graph::RegimeGraphSet;
use switching_core::metrics::{causal_f1, f1_matrix, mcc, regime_f1, MccMode};
use switching_core::msm::Trajectory;

macro_rules! check {
    ($cond:expr) => {
        if !$cond {
            return Err(stringify!($cond).to_string());
        }
    };
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn random_labels(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..k)).collect()
}

pub fn random_latents(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

pub fn map_rows(rows: &[Vec<f64>], f: impl Fn(&[f64]) -> Vec<f64>) -> Trajectory {
    Trajectory::from_rows(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap()
}

pub fn random_graphs(rng: &mut ChaCha8Rng, k: usize, m: usize, lag: usize) -> RegimeGraphSet {
    let graphs = (0..k)
        .map(|_| Some((0..m).map(|_| (0..m * lag).map(|_| rng.gen_bool(0.4)).collect()).collect()))
        .collect();
    RegimeGraphSet::new(m, lag, graphs).unwrap()
}

pub fn conjugate(g: &RegimeGraphSet, perm: &[usize]) -> RegimeGraphSet {
    // new node i is old node perm[i]
    let m = g.dim;
    let graphs = g
        .graphs
        .iter()
        .map(|e| {
            e.as_ref().map(|e| {
                (0..m).map(|row| (0..m * g.lag).map(|c| e[perm[row]][(c / m) * m + perm[c % m]]).collect()).collect()
            })
        })
        .collect();
    RegimeGraphSet::new(m, g.lag, graphs).unwrap()
}


pub fn regime_f1_ignores_relabelling_of_predictions(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=5);
    let truth = random_labels(&mut rng, 60, k);
    let pred = random_labels(&mut rng, 60, k);
    let mut relabel: Vec<usize> = (0..k).collect();
    relabel.shuffle(&mut rng);
    let moved: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
    let a = regime_f1(&truth, &pred, k, k).unwrap();
    let b = regime_f1(&truth, &moved, k, k).unwrap();
    check!((a.f1 - b.f1).abs() < 1e-12);
    Ok(())
}

pub fn assignment_matches_exhaustive_search(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=5);
    let truth = random_labels(&mut rng, 40, k);
    let pred = random_labels(&mut rng, 40, k);
    let scores = f1_matrix(&truth, &pred, k, k);
    let best = permutations(k)
        .iter()
        .map(|p| (0..k).map(|i| scores[i][p[i]]).sum::<f64>() / k as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let got = regime_f1(&truth, &pred, k, k).unwrap();
    check!((got.f1 - best).abs() < 1e-12, "{} vs {}", got.f1, best);
    Ok(())
}

pub fn strong_mcc_is_one_under_scaling_and_permutation(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=5);
    let rows = random_latents(&mut rng, 40, d);
    let mut p: Vec<usize> = (0..d).collect();
    p.shuffle(&mut rng);
    let scale: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let truth = Trajectory::from_rows(&rows).unwrap();
    let est = map_rows(&rows, |r| (0..d).map(|i| scale[i] * r[p[i]] + shift[i]).collect());
    let s = mcc(&truth, &est, MccMode::Strong).unwrap();
    check!((s.value - 1.0).abs() < 1e-12);
    let mut relabel: Vec<usize> = (0..d).collect();
    relabel.shuffle(&mut rng);
    let est2 = map_rows(&rows, |r| {
        let y: Vec<f64> = (0..d).map(|i| scale[i] * r[p[i]] + shift[i]).collect();
        relabel.iter().map(|&j| y[j]).collect()
    });
    check!((mcc(&truth, &est2, MccMode::Strong).unwrap().value - s.value).abs() < 1e-12);
    Ok(())
}

pub fn weak_mcc_is_one_under_affine_maps(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=5);
    let rows = random_latents(&mut rng, 60, d);
    // well-conditioned: identity plus a small random perturbation, then scaled
    let a: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3) / d as f64).collect())
        .collect();
    let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let truth = Trajectory::from_rows(&rows).unwrap();
    let est = map_rows(&rows, |r| (0..d).map(|i| (0..d).map(|j| a[i][j] * r[j]).sum::<f64>() + b[i]).collect());
    let w = mcc(&truth, &est, MccMode::Weak).unwrap();
    check!((w.value - 1.0).abs() < 1e-6);
    Ok(())
}

pub fn causal_f1_is_equivariant_under_node_permutation(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, m, lag) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3));
    let t = random_graphs(&mut rng, k, m, lag);
    let e = random_graphs(&mut rng, k, m, lag);
    let mut sigma: Vec<usize> = (0..k).collect();
    sigma.shuffle(&mut rng);
    let id: Vec<usize> = (0..m).collect();
    let base = causal_f1(&t, &e, &sigma, &id).unwrap().f1;
    let mut p: Vec<usize> = (0..m).collect();
    p.shuffle(&mut rng);
    let moved = causal_f1(&conjugate(&t, &p), &conjugate(&e, &p), &sigma, &id).unwrap().f1;
    check!((base - moved).abs() < 1e-12);
    // estimated node j of conjugate(t, p) is true node p[j]; true node i sits at p^-1(i)
    let mut inv = vec![0; m];
    for (j, &i) in p.iter().enumerate() {
        inv[i] = j;
    }
    check!(causal_f1(&t, &conjugate(&t, &p), &(0..k).collect::<Vec<_>>(), &inv).unwrap().f1 == 1.0);
    Ok(())
}
