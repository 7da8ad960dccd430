//! Categorical MLP policy with exact hand-derived gradients.
//!
//! Architecture is fixed: 30 -> 128 -> 128 -> 5 with ReLU activations and
//! action logits out. All math is f64 and every dot product runs through one
//! shared kernel with a frozen summation order, so a forward pass computes
//! bit-identical logits no matter where it is called from (rollout sampling,
//! loss evaluation, gradient accumulation). That is what makes the
//! first-epoch importance ratios exactly 1.
//!
//! The gradient engine is plain reverse-mode for this one architecture: the
//! caller supplies dLoss/dLogits per sample and gets parameter-space
//! gradients back. Correctness is pinned by central finite differences.

#![allow(clippy::needless_range_loop)]

use rand::Rng;

use crate::gridworld::{Action, OBS_DIM};
use crate::optim::{adam_step_slice, AdamHyper};
use crate::rng;

pub const HIDDEN: usize = 128;
pub const NUM_ACTIONS: usize = 5;

/// Flat parameter blocks, row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Vec<f64>, // HIDDEN x OBS_DIM
    pub b1: Vec<f64>, // HIDDEN
    pub w2: Vec<f64>, // HIDDEN x HIDDEN
    pub b2: Vec<f64>, // HIDDEN
    pub w3: Vec<f64>, // NUM_ACTIONS x HIDDEN
    pub b3: Vec<f64>, // NUM_ACTIONS
}

/// Gradients share the parameter layout.
pub type MlpGrads = MlpParams;

impl MlpParams {
    pub fn zeros() -> Self {
        Self {
            w1: vec![0.0; HIDDEN * OBS_DIM],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN * HIDDEN],
            b2: vec![0.0; HIDDEN],
            w3: vec![0.0; NUM_ACTIONS * HIDDEN],
            b3: vec![0.0; NUM_ACTIONS],
        }
    }

    /// Seeded fan-in-scaled uniform init: weights U(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    /// biases zero. Draw order is frozen (w1 rows, w2 rows, w3 rows).
    pub fn init(seed: u64) -> Self {
        let mut p = Self::zeros();
        let mut rng = rng::stream(seed, &[rng::domain::POLICY_INIT]);
        for (block, fan_in) in [
            (&mut p.w1, OBS_DIM),
            (&mut p.w2, HIDDEN),
            (&mut p.w3, HIDDEN),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in block.iter_mut() {
                *w = bound * (2.0 * rng.gen::<f64>() - 1.0);
            }
        }
        p
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Flat parameter access across blocks, used by finite-difference checks.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for (_, b) in self.blocks() {
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn add_flat(&mut self, mut idx: usize, delta: f64) {
        for (_, b) in self.blocks_mut() {
            if idx < b.len() {
                b[idx] += delta;
                return;
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    /// Name of the first parameter block containing a non-finite value.
    pub fn find_non_finite_block(&self) -> Option<&'static str> {
        self.blocks()
            .into_iter()
            .find(|(_, b)| !b.iter().all(|v| v.is_finite()))
            .map(|(name, _)| name)
    }

    /// Forward pass keeping hidden activations for backprop.
    pub fn forward_cached(&self, obs: &[f64]) -> ForwardCache {
        debug_assert_eq!(obs.len(), OBS_DIM);
        let mut h1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            h1[j] = (dot(&self.w1[j * OBS_DIM..(j + 1) * OBS_DIM], obs) + self.b1[j]).max(0.0);
        }
        let mut h2 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            h2[j] = (dot(&self.w2[j * HIDDEN..(j + 1) * HIDDEN], &h1) + self.b2[j]).max(0.0);
        }
        let mut logits = [0.0; NUM_ACTIONS];
        for j in 0..NUM_ACTIONS {
            logits[j] = dot(&self.w3[j * HIDDEN..(j + 1) * HIDDEN], &h2) + self.b3[j];
        }
        ForwardCache { h1, h2, logits }
    }

    pub fn forward_logits(&self, obs: &[f64]) -> [f64; NUM_ACTIONS] {
        self.forward_cached(obs).logits
    }

    /// Accumulates parameter gradients for one sample given dLoss/dLogits.
    pub fn backprop_logits(
        &self,
        obs: &[f64],
        cache: &ForwardCache,
        dlogits: &[f64; NUM_ACTIONS],
        grads: &mut MlpGrads,
    ) {
        // Output layer.
        let mut dh2 = [0.0; HIDDEN];
        for j in 0..NUM_ACTIONS {
            let d = dlogits[j];
            grads.b3[j] += d;
            let row = &mut grads.w3[j * HIDDEN..(j + 1) * HIDDEN];
            let wrow = &self.w3[j * HIDDEN..(j + 1) * HIDDEN];
            for k in 0..HIDDEN {
                row[k] += d * cache.h2[k];
                dh2[k] += wrow[k] * d;
            }
        }
        // Second hidden layer (ReLU subgradient 0 at exactly 0).
        let mut dh1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            if cache.h2[j] <= 0.0 {
                continue;
            }
            let d = dh2[j];
            grads.b2[j] += d;
            let row = &mut grads.w2[j * HIDDEN..(j + 1) * HIDDEN];
            let wrow = &self.w2[j * HIDDEN..(j + 1) * HIDDEN];
            for k in 0..HIDDEN {
                row[k] += d * cache.h1[k];
                dh1[k] += wrow[k] * d;
            }
        }
        // First hidden layer.
        for j in 0..HIDDEN {
            if cache.h1[j] <= 0.0 {
                continue;
            }
            let d = dh1[j];
            grads.b1[j] += d;
            let row = &mut grads.w1[j * OBS_DIM..(j + 1) * OBS_DIM];
            for k in 0..OBS_DIM {
                row[k] += d * obs[k];
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, b) in self.blocks_mut() {
            for v in b.iter_mut() {
                *v *= c;
            }
        }
    }
}

/// Hidden activations and logits from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub h1: [f64; HIDDEN],
    pub h2: [f64; HIDDEN],
    pub logits: [f64; NUM_ACTIONS],
}

/// Dot product with a frozen summation order (4 interleaved accumulators).
/// Everything that multiplies parameters goes through here so that repeated
/// evaluations agree bit-for-bit.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut j = 0;
    while j < n4 {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        j += 4;
    }
    let mut tail = 0.0;
    while j < a.len() {
        tail += a[j] * b[j];
        j += 1;
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    let lse = max + sum.ln();
    let mut out = [0.0; NUM_ACTIONS];
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
    out
}

pub fn probs(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let lp = log_softmax(logits);
    lp.map(f64::exp)
}

/// Log-probability of `action` and the policy entropy at these logits.
pub fn log_prob_and_entropy(logits: &[f64; NUM_ACTIONS], action: Action) -> (f64, f64) {
    let lp = log_softmax(logits);
    let mut entropy = 0.0;
    for &l in &lp {
        entropy -= l.exp() * l;
    }
    (lp[action.index()], entropy)
}

/// d entropy / d logits = -p_j (log p_j + H).
pub fn entropy_logit_grad(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let lp = log_softmax(logits);
    let mut entropy = 0.0;
    for &l in &lp {
        entropy -= l.exp() * l;
    }
    let mut g = [0.0; NUM_ACTIONS];
    for j in 0..NUM_ACTIONS {
        g[j] = -lp[j].exp() * (lp[j] + entropy);
    }
    g
}

/// d log p(action) / d logits = one_hot(action) - p.
pub fn log_prob_logit_grad(logits: &[f64; NUM_ACTIONS], action: Action) -> [f64; NUM_ACTIONS] {
    let p = probs(logits);
    let mut g = [0.0; NUM_ACTIONS];
    for j in 0..NUM_ACTIONS {
        g[j] = -p[j];
    }
    g[action.index()] += 1.0;
    g
}

/// Samples from softmax(logits) by inverse CDF over the action order.
pub fn sample_action<R: Rng>(logits: &[f64; NUM_ACTIONS], rng: &mut R) -> Action {
    let p = probs(logits);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return Action::ALL[i];
        }
    }
    Action::ALL[NUM_ACTIONS - 1]
}

/// Adam over the six parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            m: MlpParams::zeros(),
            v: MlpParams::zeros(),
            t: 0,
            hyper: AdamHyper::with_lr(lr),
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) {
        self.t += 1;
        let t = self.t;
        let h = self.hyper.clone();
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut().into_iter().zip(self.v.blocks_mut()))
        {
            adam_step_slice(p, g, m, v, t, &h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_obs(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..OBS_DIM).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let p = MlpParams::zeros();
        let logits = p.forward_logits(&random_obs(0));
        assert_eq!(logits, [0.0; NUM_ACTIONS]);
        for prob in probs(&logits) {
            assert!((prob - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let obs = random_obs(1);
        let a = MlpParams::init(42).forward_logits(&obs);
        let b = MlpParams::init(42).forward_logits(&obs);
        assert_eq!(a, b);
        let c = MlpParams::init(43).forward_logits(&obs);
        assert_ne!(a, c);
    }

    /// Central finite differences on a handful of weights, against the
    /// backprop path with dlogits = e_0 (i.e. d logits[0] / d w).
    #[test]
    fn logit_gradient_matches_finite_differences() {
        let params = MlpParams::init(7);
        let obs = random_obs(2);
        let cache = params.forward_cached(&obs);
        let mut grads = MlpParams::zeros();
        params.backprop_logits(&obs, &cache, &[1.0, 0.0, 0.0, 0.0, 0.0], &mut grads);

        let n = params.num_params();
        let delta = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let idx = rng.gen_range(0..n);
            let mut plus = params.clone();
            plus.add_flat(idx, delta);
            let mut minus = params.clone();
            minus.add_flat(idx, -delta);
            let fd =
                (plus.forward_logits(&obs)[0] - minus.forward_logits(&obs)[0]) / (2.0 * delta);
            let an = grads.get_flat(idx);
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "idx {idx}: analytic {an}, fd {fd}"
            );
        }
    }

    #[test]
    fn uniform_logits_log_prob_and_entropy() {
        let logits = [0.0; NUM_ACTIONS];
        let (lp, h) = log_prob_and_entropy(&logits, Action::North);
        assert!((lp - (1.0f64 / 5.0).ln()).abs() < 1e-12);
        assert!((h - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn extreme_logit_is_stable() {
        let logits = [1000.0, 0.0, 0.0, 0.0, 0.0];
        let (lp, h) = log_prob_and_entropy(&logits, Action::North);
        assert!((-1e-12..=0.0).contains(&lp));
        assert!((0.0..1e-9).contains(&h));
        assert!(probs(&logits)[0] > 1.0 - 1e-12);
    }

    #[test]
    fn entropy_matches_direct_five_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let logits: [f64; NUM_ACTIONS] =
                std::array::from_fn(|_| 4.0 * (rng.gen::<f64>() - 0.5));
            let (_, h) = log_prob_and_entropy(&logits, Action::Stay);
            // Independent route: plain softmax then -sum p ln p.
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let direct: f64 = logits
                .iter()
                .map(|l| {
                    let p = l.exp() / z;
                    -p * p.ln()
                })
                .sum();
            assert!((h - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_frequencies_match_softmax() {
        let logits = [0.0; NUM_ACTIONS];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; NUM_ACTIONS];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_action(&logits, &mut rng).index()] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.2).abs() < 0.01, "freq {freq}");
        }

        let peaked = [30.0, 0.0, 0.0, 0.0, 0.0];
        let mut hits = 0;
        for _ in 0..10_000 {
            if sample_action(&peaked, &mut rng) == Action::North {
                hits += 1;
            }
        }
        assert!(hits as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn sampling_is_reproducible() {
        let logits = [0.3, -0.2, 0.9, 0.0, -1.0];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| sample_action(&logits, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn entropy_gradient_is_zero_at_uniform_policy() {
        let g = entropy_logit_grad(&[0.0; NUM_ACTIONS]);
        for v in g {
            assert!(v.abs() < 1e-15);
        }
        // Backprop of an entropy-only loss through zero params is all zero.
        let params = MlpParams::zeros();
        let obs = random_obs(4);
        let cache = params.forward_cached(&obs);
        let mut grads = MlpParams::zeros();
        params.backprop_logits(&obs, &cache, &g, &mut grads);
        for (_, b) in grads.blocks() {
            assert!(b.iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn entropy_logit_grad_matches_finite_differences() {
        let logits = [0.7, -0.3, 0.1, 1.2, -0.9];
        let g = entropy_logit_grad(&logits);
        for j in 0..NUM_ACTIONS {
            let mut lp = logits;
            lp[j] += 1e-6;
            let mut lm = logits;
            lm[j] -= 1e-6;
            let fd = (log_prob_and_entropy(&lp, Action::North).1
                - log_prob_and_entropy(&lm, Action::North).1)
                / 2e-6;
            assert!((g[j] - fd).abs() < 1e-8, "j {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_increments_t() {
        let mut params = MlpParams::init(1);
        let before = params.clone();
        let mut adam = AdamState::new(5e-4);
        adam.step(&mut params, &MlpParams::zeros());
        assert_eq!(params, before);
        assert_eq!(adam.t, 1);
    }

    proptest! {
        #[test]
        fn probs_sum_to_one(raw in proptest::collection::vec(-30.0f64..30.0, NUM_ACTIONS)) {
            let logits: [f64; NUM_ACTIONS] = std::array::from_fn(|i| raw[i]);
            let total: f64 = probs(&logits).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_prob_and_entropy_shift_invariant(
            raw in proptest::collection::vec(-20.0f64..20.0, NUM_ACTIONS),
            shift in -50.0f64..50.0,
            action_idx in 0usize..NUM_ACTIONS,
        ) {
            let logits: [f64; NUM_ACTIONS] = std::array::from_fn(|i| raw[i]);
            let shifted: [f64; NUM_ACTIONS] = std::array::from_fn(|i| raw[i] + shift);
            let action = Action::from_index(action_idx).unwrap();
            let (lp_a, h_a) = log_prob_and_entropy(&logits, action);
            let (lp_b, h_b) = log_prob_and_entropy(&shifted, action);
            prop_assert!((lp_a - lp_b).abs() < 1e-10);
            prop_assert!((h_a - h_b).abs() < 1e-10);
        }
    }
}
