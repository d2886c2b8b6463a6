//! Adam over a list of parameter blocks, used for gradient ascent.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One ascent step. Blocks with `active[i] == false` are left untouched,
    /// including their moment estimates.
    pub fn ascend(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], active: &[bool]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), active.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate * c2.sqrt() / c1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !active[i] {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] += lr * m[j] / (v[j].sqrt() + self.eps * c2.sqrt());
            }
        }
    }
}

/// Halve the rate when the tracked objective stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauRule {
    /// Epochs over which improvement is measured.
    pub window: usize,
    /// Relative improvement below which the objective counts as flat.
    pub rel_tol: f64,
    pub factor: f64,
    pub max_decays: usize,
}

impl Default for PlateauRule {
    fn default() -> Self {
        PlateauRule { window: 10, rel_tol: 1e-4, factor: 0.5, max_decays: 2 }
    }
}

/// Multiply the rate by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

/// Tracks per-epoch objective values and adjusts the learning rate.
#[derive(Debug, Clone)]
pub struct LrController {
    lr: f64,
    plateau: PlateauRule,
    step: Option<StepDecay>,
    since_decay: Vec<f64>,
    epochs: usize,
    pub plateau_decays: Vec<usize>,
}

impl LrController {
    pub fn new(lr: f64, plateau: PlateauRule, step: Option<StepDecay>) -> Self {
        LrController { lr, plateau, step, since_decay: Vec::new(), epochs: 0, plateau_decays: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records the objective of the epoch just finished and returns the rate for the next one.
    pub fn observe(&mut self, objective: f64) -> f64 {
        self.epochs += 1;
        self.since_decay.push(objective);
        let w = self.plateau.window;
        if w > 0 && self.plateau_decays.len() < self.plateau.max_decays && self.since_decay.len() > w {
            let old = self.since_decay[self.since_decay.len() - 1 - w];
            let gain = (objective - old) / old.abs().max(1e-12);
            if gain < self.plateau.rel_tol {
                self.lr *= self.plateau.factor;
                self.plateau_decays.push(self.epochs);
                self.since_decay.clear();
            }
        }
        if let Some(s) = self.step {
            if s.every > 0 && self.epochs % s.every == 0 {
                self.lr *= s.factor;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_halves_at_most_twice() {
        let mut c = LrController::new(1.0, PlateauRule::default(), None);
        for _ in 0..100 {
            c.observe(-5.0);
        }
        assert_eq!(c.lr(), 0.25);
        assert_eq!(c.plateau_decays, vec![11, 22]);
    }

    #[test]
    fn improving_objective_keeps_rate() {
        let mut c = LrController::new(1.0, PlateauRule::default(), Some(StepDecay { every: 50, factor: 0.8 }));
        for e in 0..100 {
            c.observe(-100.0 + e as f64);
        }
        assert!((c.lr() - 0.64).abs() < 1e-15);
        assert!(c.plateau_decays.is_empty());
    }

    #[test]
    fn climbs_a_concave_bowl() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
            opt.ascend(&mut [x.as_mut_slice()], &[g.as_slice()], &[true]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn inactive_blocks_stay_bitwise_equal() {
        let mut a = vec![1.0];
        let mut b = vec![0.123456789_f64];
        let before = b[0].to_bits();
        let mut opt = Adam::new(0.5);
        for _ in 0..10 {
            opt.ascend(&mut [a.as_mut_slice(), b.as_mut_slice()], &[&[1.0], &[1.0]], &[true, false]);
        }
        assert_eq!(b[0].to_bits(), before);
        assert!(a[0] > 1.0);
    }
}
