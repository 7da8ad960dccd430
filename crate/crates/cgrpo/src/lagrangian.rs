//! Lagrangian multipliers over indicator cost constraints.
//!
//! Multipliers live on a simplex with a fixed dummy logit for the reward
//! term: `lambda_k = exp(z_k) / (exp(a_R) + sum exp(z_k'))` and
//! `lambda_R = 1 - sum lambda_k`. Only the K constraint logits are learned;
//! `a_R` stays at 0 since only ratios matter.
//!
//! Constraint violations are estimated as the flat per-timestep rate over a
//! batch (all visited state-action pairs weigh equally). Each update takes
//! one Adam step per logit on the violation gap `J_k - d_k`: a violated
//! constraint pushes its logit up, a satisfied one pushes it down, and the
//! softmax renormalization keeps the simplex intact without any clipping.

use crate::optim::{adam_step_slice, AdamHyper};

/// Softmax over the fixed reward logit and the constraint logits.
/// Returns `[lambda_R, lambda_1, ..., lambda_K]`.
pub fn normalize(z: &[f64], reward_logit: f64) -> Vec<f64> {
    let max = z
        .iter()
        .cloned()
        .fold(reward_logit, f64::max);
    let mut out = Vec::with_capacity(z.len() + 1);
    out.push((reward_logit - max).exp());
    out.extend(z.iter().map(|&l| (l - max).exp()));
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Per-constraint flat violation rates over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationEstimate {
    /// Mean indicator value per constraint, in [0, 1].
    pub rates: Vec<f64>,
    /// Total timesteps the average ran over.
    pub timesteps: usize,
}

/// Cost summary of one trajectory: its length and the number of violating
/// steps per constraint channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryCosts {
    pub steps: usize,
    pub events: Vec<usize>,
}

/// Flat average of each indicator over every timestep in the batch.
pub fn estimate_violations(trajectories: &[TrajectoryCosts]) -> ViolationEstimate {
    assert!(!trajectories.is_empty(), "violation estimate over empty batch");
    let channels = trajectories[0].events.len();
    let mut events = vec![0usize; channels];
    let mut steps = 0usize;
    for t in trajectories {
        debug_assert_eq!(t.events.len(), channels);
        steps += t.steps;
        for (acc, &e) in events.iter_mut().zip(&t.events) {
            *acc += e;
        }
    }
    ViolationEstimate {
        rates: events.iter().map(|&e| e as f64 / steps as f64).collect(),
        timesteps: steps,
    }
}

/// Learned multiplier state for K constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierState {
    /// Unnormalized constraint logits.
    pub z: Vec<f64>,
    /// Fixed reward dummy logit.
    pub reward_logit: f64,
    /// Target violation rates, one per constraint.
    pub thresholds: Vec<f64>,
    /// Adam moments over `z`.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl MultiplierState {
    pub fn new(thresholds: Vec<f64>, lr: f64, init_logit: f64) -> Self {
        let k = thresholds.len();
        Self {
            z: vec![init_logit; k],
            reward_logit: 0.0,
            thresholds,
            m: vec![0.0; k],
            v: vec![0.0; k],
            t: 0,
            hyper: AdamHyper::with_lr(lr),
        }
    }

    pub fn num_constraints(&self) -> usize {
        self.z.len()
    }

    /// Current simplex `[lambda_R, lambda_1, ..., lambda_K]`.
    pub fn lambda(&self) -> Vec<f64> {
        normalize(&self.z, self.reward_logit)
    }

    /// One multiplier update from a violation estimate.
    ///
    /// Each logit descends the per-constraint Lagrangian gradient
    /// `-(J_k - d_k)`, so a violated constraint's multiplier strictly rises
    /// and a satisfied one's falls; the simplex is restored by `lambda()`.
    pub fn update(&mut self, violations: &ViolationEstimate) {
        assert_eq!(violations.rates.len(), self.z.len());
        let grads: Vec<f64> = violations
            .rates
            .iter()
            .zip(&self.thresholds)
            .map(|(j, d)| -(j - d))
            .collect();
        self.t += 1;
        let hyper = self.hyper.clone();
        adam_step_slice(&mut self.z, &grads, &mut self.m, &mut self.v, self.t, &hyper);
    }
}
