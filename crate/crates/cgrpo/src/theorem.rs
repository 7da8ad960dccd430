//! Verification of the implicit-reweighting identity.
//!
//! Two checks back the effective-weight diagnostics:
//!
//! 1. A frozen worked example: weights (0.3, 0.7) over components with
//!    sigmas (0.5, 0.2) and correlation 0.1 give
//!    `sigma_RS = sqrt(0.3^2 0.5^2 + 0.7^2 0.2^2 + 2*0.3*0.7*0.1*0.5*0.2)
//!    ~= 0.215174` and effective weights `(0.697, 0.651)` -- the combined
//!    standardization flips which component dominates.
//! 2. Monte Carlo over random groups and random simplex weights:
//!    - identity: `standardize(w'x) == sum_j (w_j sigma_j / sigma_RS) Z_j`
//!      holds to 1e-9 on every non-degenerate group;
//!    - scale contrast: rescaling one cost channel by c in {0.1, 10} leaves
//!      the scalarized-advantage construction unchanged (z-scores are scale
//!      invariant) while the scalarized-reward construction moves whenever
//!      that channel carries weight above 0.01.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::advantage::{
    covariance_from_sigmas_rho, effective_weights, scalarized_advantages,
    scalarized_reward_advantages, ComponentWeights, GroupReturns, DEFAULT_EPS,
};
use crate::rng::{self, domain};

/// Tolerances of the verification suite (also used by the acceptance tests).
pub const WORKED_SIGMA_TOL: f64 = 1e-6;
pub const WORKED_WEIGHT_TOL: f64 = 1e-3;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const SCADV_INVARIANCE_TOL: f64 = 1e-12;
pub const SCREW_CHANGE_MIN: f64 = 1e-6;

/// Frozen two-component example values.
pub const WORKED_SIGMA_RS: f64 = 0.215174;
pub const WORKED_WEIGHTS: [f64; 2] = [0.697, 0.651];

#[derive(Debug, Clone)]
pub struct TheoremReport {
    /// Worked example outputs.
    pub worked_sigma_rs: f64,
    pub worked_weights: [f64; 2],
    /// Identity sweep.
    pub groups_sampled: usize,
    pub groups_checked: usize,
    pub degenerate_groups: usize,
    pub worst_identity_residual: f64,
    /// Scale-contrast sweep.
    pub contrast_checked: usize,
    pub worst_scadv_change: f64,
    pub smallest_screw_change: f64,
    pub failures: Vec<String>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "worked example: sigma_RS = {:.9} (expect {WORKED_SIGMA_RS} +- {WORKED_SIGMA_TOL}), \
             effective weights = ({:.6}, {:.6}) (expect ({}, {}) +- {WORKED_WEIGHT_TOL})\n",
            self.worked_sigma_rs,
            self.worked_weights[0],
            self.worked_weights[1],
            WORKED_WEIGHTS[0],
            WORKED_WEIGHTS[1],
        ));
        s.push_str(&format!(
            "identity: {} groups sampled, {} checked, {} degenerate (guarded), \
             worst residual = {:.3e} (tolerance {IDENTITY_TOL:.0e})\n",
            self.groups_sampled,
            self.groups_checked,
            self.degenerate_groups,
            self.worst_identity_residual,
        ));
        s.push_str(&format!(
            "scale contrast: {} cases, max scalarized-advantage change = {:.3e} \
             (tolerance {SCADV_INVARIANCE_TOL:.0e}), min scalarized-reward change = {:.3e} \
             (must exceed {SCREW_CHANGE_MIN:.0e})\n",
            self.contrast_checked, self.worst_scadv_change, self.smallest_screw_change,
        ));
        if self.failures.is_empty() {
            s.push_str("PASS\n");
        } else {
            for f in &self.failures {
                s.push_str(&format!("FAIL: {f}\n"));
            }
        }
        s
    }
}

/// One random group: sizes G in {4, 8, 16}, K in {1, 2, 3} cost channels,
/// component rows drawn from mixed families (indicator-like, counts,
/// continuous, occasionally constant to exercise the degenerate guard).
pub fn random_group(rng: &mut ChaCha8Rng) -> (GroupReturns, ComponentWeights) {
    let g = [4usize, 8, 16][rng.gen_range(0..3)];
    let k = rng.gen_range(1..=3);
    // A slice of fully constant groups exercises the degenerate guard; the
    // rest mix indicator-like, count and continuous rows with occasional
    // single constant components.
    let fully_degenerate = rng.gen_bool(0.02);
    let draw_row = |rng: &mut ChaCha8Rng, indicator: bool| -> Vec<f64> {
        if fully_degenerate {
            return vec![rng.gen_range(0..3) as f64; g];
        }
        match rng.gen_range(0..5) {
            0 => vec![rng.gen_range(0..3) as f64; g],
            1 if indicator => {
                let p = rng.gen::<f64>();
                (0..g).map(|_| f64::from(rng.gen_bool(p))).collect()
            }
            2 => (0..g).map(|_| rng.gen_range(0..12) as f64).collect(),
            _ => (0..g).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect(),
        }
    };
    let returns = GroupReturns {
        reward: draw_row(rng, true),
        costs: (0..k).map(|_| draw_row(rng, false)).collect(),
    };
    // Random simplex via normalized exponentials.
    let mut raw: Vec<f64> = (0..=k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let total: f64 = raw.iter().sum();
    for v in &mut raw {
        *v /= total;
    }
    let weights = ComponentWeights {
        reward: raw[0],
        costs: raw[1..].to_vec(),
    };
    (returns, weights)
}

/// Runs the full verification suite.
pub fn verify(samples: usize, seed: u64) -> TheoremReport {
    let mut failures = Vec::new();

    // (a) Worked example.
    let sigmas = [0.5, 0.2];
    let cov = covariance_from_sigmas_rho(&sigmas, 0.1);
    let worked = effective_weights(&sigmas, &[0.3, 0.7], &cov, DEFAULT_EPS);
    let worked_weights = worked.weights.clone().expect("non-degenerate example");
    let worked_sigma_rs = worked.sigma_scalarized;
    if (worked_sigma_rs - WORKED_SIGMA_RS).abs() > WORKED_SIGMA_TOL {
        failures.push(format!(
            "worked example sigma_RS {worked_sigma_rs} departs from {WORKED_SIGMA_RS}"
        ));
    }
    for (i, expect) in WORKED_WEIGHTS.iter().enumerate() {
        if (worked_weights[i] - expect).abs() > WORKED_WEIGHT_TOL {
            failures.push(format!(
                "worked example weight {i} is {} (expected {expect})",
                worked_weights[i]
            ));
        }
    }

    // (b) Monte Carlo identity + scale contrast.
    let mut rng = rng::stream(seed, &[domain::THEOREM]);
    let mut groups_checked = 0usize;
    let mut degenerate_groups = 0usize;
    let mut worst_identity_residual: f64 = 0.0;
    let mut contrast_checked = 0usize;
    let mut worst_scadv_change: f64 = 0.0;
    let mut smallest_screw_change = f64::INFINITY;

    for sample in 0..samples {
        let (returns, weights) = random_group(&mut rng);
        let (advantages, stats) =
            scalarized_reward_advantages(&returns, &weights, DEFAULT_EPS).expect("G >= 2");

        if stats.sigma_scalarized < DEFAULT_EPS {
            degenerate_groups += 1;
            if advantages.iter().any(|&a| a != 0.0) {
                failures.push(format!(
                    "sample {sample}: degenerate group produced nonzero advantages"
                ));
            }
            continue;
        }

        let ew = effective_weights(
            &stats.sigmas,
            &weights.signed(),
            &stats.covariance,
            DEFAULT_EPS,
        );
        let e = ew.weights.expect("sigma_RS checked above");
        for i in 0..returns.group_size() {
            let recon: f64 = e
                .iter()
                .zip(&stats.z_scores)
                .map(|(ej, z)| ej * z[i])
                .sum();
            let residual = (advantages[i] - recon).abs();
            worst_identity_residual = worst_identity_residual.max(residual);
            if residual > IDENTITY_TOL {
                failures.push(format!("sample {sample}: identity residual {residual:.3e}"));
            }
        }
        groups_checked += 1;

        // Scale contrast on eligible groups: every component non-degenerate
        // and the rescaled channel carries weight above 0.01.
        let channel = sample % returns.num_channels();
        let scale = if sample % 2 == 0 { 0.1 } else { 10.0 };
        let eligible = weights.costs[channel] > 0.01
            && stats.sigmas.iter().all(|&s| s >= 10.0 * DEFAULT_EPS);
        if !eligible {
            continue;
        }
        let mut scaled = returns.clone();
        for v in &mut scaled.costs[channel] {
            *v *= scale;
        }
        let (scadv_base, _) = scalarized_advantages(&returns, &weights, DEFAULT_EPS).unwrap();
        let (scadv_scaled, _) = scalarized_advantages(&scaled, &weights, DEFAULT_EPS).unwrap();
        let (screw_scaled, scaled_stats) =
            scalarized_reward_advantages(&scaled, &weights, DEFAULT_EPS).unwrap();
        if scaled_stats.sigma_scalarized < DEFAULT_EPS {
            continue;
        }
        let scadv_change = scadv_base
            .iter()
            .zip(&scadv_scaled)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let screw_change = advantages
            .iter()
            .zip(&screw_scaled)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_scadv_change = worst_scadv_change.max(scadv_change);
        smallest_screw_change = smallest_screw_change.min(screw_change);
        if scadv_change > SCADV_INVARIANCE_TOL {
            failures.push(format!(
                "sample {sample}: scalarized advantages moved {scadv_change:.3e} under rescaling"
            ));
        }
        if screw_change < SCREW_CHANGE_MIN {
            failures.push(format!(
                "sample {sample}: scalarized rewards moved only {screw_change:.3e} under rescaling"
            ));
        }
        contrast_checked += 1;
    }

    TheoremReport {
        worked_sigma_rs,
        worked_weights: [worked_weights[0], worked_weights[1]],
        groups_sampled: samples,
        groups_checked,
        degenerate_groups,
        worst_identity_residual,
        contrast_checked,
        worst_scadv_change,
        smallest_screw_change,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_moderate_size() {
        let report = verify(2_000, 123);
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert!(report.groups_checked > 1_000);
        assert!(report.degenerate_groups > 0, "degenerate guard never exercised");
        assert!(report.contrast_checked > 200);
        assert!(report.worst_identity_residual < IDENTITY_TOL);
    }

    #[test]
    fn report_renders_pass_line() {
        let report = verify(200, 7);
        assert!(report.render().contains("PASS"));
    }

    #[test]
    fn suite_is_deterministic() {
        let a = verify(500, 9);
        let b = verify(500, 9);
        assert_eq!(a.worst_identity_residual, b.worst_identity_residual);
        assert_eq!(a.groups_checked, b.groups_checked);
    }
}
