//! Within-group standardization and the two advantage constructions.
//!
//! A group is G trajectories sharing one episode configuration. Each
//! trajectory carries K+1 outcome components: the goal return R and one
//! cumulative cost per constraint channel. Two ways to build advantages:
//!
//! - `scalarized_reward_advantages`: combine first
//!   (`R_S = w_R R - sum_k w_k C_k`), then standardize `R_S` in the group.
//! - `scalarized_advantages`: standardize each component in the group, then
//!   combine the z-scores (`A = w_R Z_R - sum_k w_k Z_k`).
//!
//! Standardizing the combined signal rescales component j's contribution to
//! `w_j sigma_j / sigma_RS` where `sigma_RS^2 = w' Sigma w` over the group
//! covariance; those are the *effective weights* this module reports. The
//! scalarized-advantage construction keeps the weights themselves as the
//! effective weights.

use thiserror::Error;

/// Guard for near-zero group standard deviations.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdvantageError {
    #[error("group has {0} trajectories; standardization needs at least 2")]
    GroupTooSmall(usize),
    #[error("component weight count {weights} does not match cost channels {channels}")]
    WeightMismatch { weights: usize, channels: usize },
}

/// Advantage construction selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageMode {
    ScalarizedRewards,
    ScalarizedAdvantages,
}

impl AdvantageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdvantageMode::ScalarizedRewards => "scalarized-rewards",
            AdvantageMode::ScalarizedAdvantages => "scalarized-advantages",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scalarized-rewards" | "screw" => Some(AdvantageMode::ScalarizedRewards),
            "scalarized-advantages" | "scadv" => Some(AdvantageMode::ScalarizedAdvantages),
            _ => None,
        }
    }
}

/// Per-trajectory outcome returns for one group: `reward[i]` is the goal
/// indicator of trajectory i, `costs[k][i]` the cumulative cost of channel k.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReturns {
    pub reward: Vec<f64>,
    pub costs: Vec<Vec<f64>>,
}

impl GroupReturns {
    pub fn group_size(&self) -> usize {
        self.reward.len()
    }

    pub fn num_channels(&self) -> usize {
        self.costs.len()
    }

    /// Component matrix rows: index 0 is the reward, then one row per cost.
    fn components(&self) -> Vec<&[f64]> {
        let mut rows: Vec<&[f64]> = Vec::with_capacity(1 + self.costs.len());
        rows.push(&self.reward);
        for c in &self.costs {
            debug_assert_eq!(c.len(), self.reward.len());
            rows.push(c);
        }
        rows
    }
}

/// Nonnegative scalarization weights: the reward weight and one weight per
/// cost channel. Costs always enter with a minus sign; the signed vector is
/// `(reward, -costs[0], ..., -costs[K-1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentWeights {
    pub reward: f64,
    pub costs: Vec<f64>,
}

impl ComponentWeights {
    pub fn fixed(reward: f64, costs: Vec<f64>) -> Self {
        Self { reward, costs }
    }

    /// Signed weight vector, reward first.
    pub fn signed(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(1 + self.costs.len());
        w.push(self.reward);
        for &c in &self.costs {
            w.push(-c);
        }
        w
    }
}

/// Group statistics per component (index 0 = reward, then costs).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub means: Vec<f64>,
    /// Population standard deviations (divide by G).
    pub sigmas: Vec<f64>,
    /// z-scores per component; degenerate components are all zeros.
    pub z_scores: Vec<Vec<f64>>,
    /// Population covariance matrix, (K+1) x (K+1).
    pub covariance: Vec<Vec<f64>>,
    /// Standard deviation of the signed scalarization: sqrt(w' Sigma w).
    pub sigma_scalarized: f64,
}

/// Effective per-component coefficients of the standardized components.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveWeights {
    pub sigma_scalarized: f64,
    /// Signed coefficients `w_j sigma_j / sigma_RS`; `None` when the group is
    /// degenerate (sigma_RS below eps), which is reported as undefined rather
    /// than as zeros.
    pub weights: Option<Vec<f64>>,
}

/// z-scores with the group's population mean/std. Degenerate inputs
/// (sigma < eps) map to all zeros.
pub fn standardize(values: &[f64], eps: f64) -> Result<Vec<f64>, AdvantageError> {
    let (mean, sigma) = mean_and_sigma(values)?;
    if sigma < eps {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / sigma).collect())
}

fn mean_and_sigma(values: &[f64]) -> Result<(f64, f64), AdvantageError> {
    let n = values.len();
    if n < 2 {
        return Err(AdvantageError::GroupTooSmall(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}

/// Means, sigmas, z-scores, covariance and sigma_RS for one group.
pub fn group_stats(
    returns: &GroupReturns,
    weights: &ComponentWeights,
    eps: f64,
) -> Result<GroupStats, AdvantageError> {
    if weights.costs.len() != returns.num_channels() {
        return Err(AdvantageError::WeightMismatch {
            weights: weights.costs.len(),
            channels: returns.num_channels(),
        });
    }
    let rows = returns.components();
    let g = returns.group_size();
    let m = rows.len();

    let mut means = Vec::with_capacity(m);
    let mut sigmas = Vec::with_capacity(m);
    let mut z_scores = Vec::with_capacity(m);
    for row in &rows {
        let (mean, sigma) = mean_and_sigma(row)?;
        z_scores.push(if sigma < eps {
            vec![0.0; g]
        } else {
            row.iter().map(|v| (v - mean) / sigma).collect()
        });
        means.push(mean);
        sigmas.push(sigma);
    }

    let mut covariance = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a..m {
            let cov = rows[a]
                .iter()
                .zip(rows[b])
                .map(|(x, y)| (x - means[a]) * (y - means[b]))
                .sum::<f64>()
                / g as f64;
            covariance[a][b] = cov;
            covariance[b][a] = cov;
        }
    }

    let signed = weights.signed();
    let sigma_scalarized = quadratic_form(&covariance, &signed).max(0.0).sqrt();

    Ok(GroupStats {
        means,
        sigmas,
        z_scores,
        covariance,
        sigma_scalarized,
    })
}

fn quadratic_form(matrix: &[Vec<f64>], v: &[f64]) -> f64 {
    let mut total = 0.0;
    for (row, &vi) in matrix.iter().zip(v) {
        total += vi * row.iter().zip(v).map(|(m, &vj)| m * vj).sum::<f64>();
    }
    total
}

/// Scalarize-then-standardize advantages plus the group diagnostics.
pub fn scalarized_reward_advantages(
    returns: &GroupReturns,
    weights: &ComponentWeights,
    eps: f64,
) -> Result<(Vec<f64>, GroupStats), AdvantageError> {
    let stats = group_stats(returns, weights, eps)?;
    let combined: Vec<f64> = (0..returns.group_size())
        .map(|i| {
            let mut v = weights.reward * returns.reward[i];
            for (w, costs) in weights.costs.iter().zip(&returns.costs) {
                v -= w * costs[i];
            }
            v
        })
        .collect();
    let advantages = standardize(&combined, eps)?;
    Ok((advantages, stats))
}

/// Standardize-then-combine advantages (per-component z-scores weighted by
/// the multipliers, costs negated).
pub fn scalarized_advantages(
    returns: &GroupReturns,
    weights: &ComponentWeights,
    eps: f64,
) -> Result<(Vec<f64>, GroupStats), AdvantageError> {
    let stats = group_stats(returns, weights, eps)?;
    let advantages = (0..returns.group_size())
        .map(|i| {
            let mut a = weights.reward * stats.z_scores[0][i];
            for (k, w) in weights.costs.iter().enumerate() {
                a -= w * stats.z_scores[k + 1][i];
            }
            a
        })
        .collect();
    Ok((advantages, stats))
}

/// Dispatches on the mode; both return the same diagnostics.
pub fn advantages_for_mode(
    mode: AdvantageMode,
    returns: &GroupReturns,
    weights: &ComponentWeights,
    eps: f64,
) -> Result<(Vec<f64>, GroupStats), AdvantageError> {
    match mode {
        AdvantageMode::ScalarizedRewards => scalarized_reward_advantages(returns, weights, eps),
        AdvantageMode::ScalarizedAdvantages => scalarized_advantages(returns, weights, eps),
    }
}

/// Effective coefficients `w_j sigma_j / sigma_RS` of the standardized
/// components inside a scalarize-then-standardize advantage.
///
/// `signed_weights` is the full signed vector (reward first); `covariance`
/// must match it. Degenerate groups report `weights: None`.
pub fn effective_weights(
    sigmas: &[f64],
    signed_weights: &[f64],
    covariance: &[Vec<f64>],
    eps: f64,
) -> EffectiveWeights {
    debug_assert_eq!(sigmas.len(), signed_weights.len());
    let sigma_scalarized = quadratic_form(covariance, signed_weights).max(0.0).sqrt();
    if sigma_scalarized < eps {
        return EffectiveWeights {
            sigma_scalarized,
            weights: None,
        };
    }
    let weights = signed_weights
        .iter()
        .zip(sigmas)
        .map(|(w, s)| w * s / sigma_scalarized)
        .collect();
    EffectiveWeights {
        sigma_scalarized,
        weights: Some(weights),
    }
}

/// Covariance matrix from per-component sigmas and one common pairwise
/// correlation (handy for worked examples and synthetic groups).
pub fn covariance_from_sigmas_rho(sigmas: &[f64], rho: f64) -> Vec<Vec<f64>> {
    let m = sigmas.len();
    let mut cov = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            cov[a][b] = if a == b {
                sigmas[a] * sigmas[a]
            } else {
                rho * sigmas[a] * sigmas[b]
            };
        }
    }
    cov
}
