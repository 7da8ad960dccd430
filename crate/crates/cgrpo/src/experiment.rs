//! Experiment specs, orchestration, evaluation and manifests.
//!
//! A spec is a flat `key = value` text file (comments with `#`, unknown keys
//! rejected by name). It resolves to a list of cells -- one `(objective,
//! seed)` training run each -- executed sequentially or on a bounded worker
//! pool; outputs are byte-identical either way. Every cell directory holds
//! the resolved single-run config, the metrics CSV, checkpoints and an eval
//! report; the experiment directory holds a manifest with a content hash of
//! the resolved spec plus per-seed and aggregated summary tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::advantage::AdvantageMode;
use crate::checkpoint::CheckpointError;
use crate::gridworld::GridConfig;
use crate::metrics::MetricsError;
use crate::policy::MlpParams;
use crate::rng::{self, domain};
use crate::trainer::{
    rollout_episode, CostReturnMode, Objective, TrainConfig, TrainError, Trainer, CH_BATTERY,
    CH_LAVA,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("spec line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("spec field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error("experiment directory already holds a different spec (manifest hash mismatch)")]
    ManifestMismatch,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExperimentError {
    /// Validation errors (bad spec / bad inputs) versus runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::Parse { .. }
                | ExperimentError::Field { .. }
                | ExperimentError::ManifestMismatch
        ) || matches!(self, ExperimentError::Train(TrainError::Config(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// What a spec runs.
#[derive(Debug, Clone, PartialEq)]
pub enum RunKind {
    /// Fixed-weight grid over (lava_weight, battery_weight).
    Sweep {
        lava_weights: Vec<f64>,
        battery_weights: Vec<f64>,
    },
    /// Constrained training with learned multipliers.
    Constrained {
        lava_threshold: Option<f64>,
        battery_threshold: Option<f64>,
    },
    /// One fixed-weight point.
    Single { lava_weight: f64, battery_weight: f64 },
}

/// A fully resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: RunKind,
    pub mode: AdvantageMode,
    pub seeds: Vec<u64>,
    pub updates: u64,
    pub episodes_per_update: usize,
    pub groups: usize,
    pub group_size: usize,
    pub epochs: usize,
    pub minibatch_timesteps: usize,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub policy_lr: f64,
    pub multiplier_lr: f64,
    pub multiplier_init_logit: f64,
    pub kl_coef: f64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
    pub shared_layouts: bool,
    pub cost_return: CostReturnMode,
    pub out: Option<PathBuf>,
}

/// The published sweep grid: nine lava weights by two battery weights.
pub const SWEEP_LAVA_WEIGHTS: [f64; 9] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0];
pub const SWEEP_BATTERY_WEIGHTS: [f64; 2] = [0.0, 0.1];

impl ExperimentSpec {
    pub fn new(kind: RunKind, mode: AdvantageMode) -> Self {
        let base = TrainConfig::new(
            mode,
            Objective::FixedWeights {
                lava: 0.0,
                battery: 0.0,
            },
            0,
        );
        Self {
            kind,
            mode,
            seeds: vec![0, 1, 2, 3, 4],
            updates: base.updates,
            episodes_per_update: base.episodes_per_update,
            groups: base.groups,
            group_size: base.group_size,
            epochs: base.epochs,
            minibatch_timesteps: base.minibatch_timesteps,
            clip_eps: base.clip_eps,
            entropy_coef: base.entropy_coef,
            policy_lr: base.policy_lr,
            multiplier_lr: base.multiplier_lr,
            multiplier_init_logit: base.multiplier_init_logit,
            kl_coef: base.kl_coef,
            eval_episodes: base.eval_episodes,
            checkpoint_every: base.checkpoint_every,
            shared_layouts: base.shared_layouts,
            cost_return: base.cost_return,
            out: None,
        }
    }

    /// Named presets filling the run kind.
    pub fn preset(name: &str, mode: AdvantageMode) -> Option<Self> {
        let kind = match name {
            "full-sweep" => RunKind::Sweep {
                lava_weights: SWEEP_LAVA_WEIGHTS.to_vec(),
                battery_weights: SWEEP_BATTERY_WEIGHTS.to_vec(),
            },
            "thresholds-tight" => RunKind::Constrained {
                lava_threshold: Some(0.01),
                battery_threshold: Some(0.01),
            },
            "thresholds-lava-only" => RunKind::Constrained {
                lava_threshold: Some(0.01),
                battery_threshold: None,
            },
            "thresholds-mixed" => RunKind::Constrained {
                lava_threshold: Some(0.01),
                battery_threshold: Some(0.1),
            },
            _ => return None,
        };
        Some(Self::new(kind, mode))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let field = |field: &str, msg: &str| {
            Err(ExperimentError::Field {
                field: field.into(),
                msg: msg.into(),
            })
        };
        if self.seeds.is_empty() {
            return field("seeds", "at least one seed is required");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return field("seeds", "seeds must be distinct");
        }
        match &self.kind {
            RunKind::Sweep {
                lava_weights,
                battery_weights,
            } => {
                if lava_weights.is_empty() || battery_weights.is_empty() {
                    return field("lava_weights", "sweep grids must be non-empty");
                }
                if lava_weights.iter().chain(battery_weights).any(|w| *w < 0.0) {
                    return field("lava_weights", "weights must be nonnegative");
                }
            }
            RunKind::Constrained {
                lava_threshold,
                battery_threshold,
            } => {
                if lava_threshold.is_none() && battery_threshold.is_none() {
                    return field("lava_threshold", "constrained runs need at least one threshold");
                }
                for d in [lava_threshold, battery_threshold].into_iter().flatten() {
                    if !(0.0..=1.0).contains(d) {
                        return field("lava_threshold", "thresholds are rates in [0, 1]");
                    }
                }
            }
            RunKind::Single {
                lava_weight,
                battery_weight,
            } => {
                if *lava_weight < 0.0 || *battery_weight < 0.0 {
                    return field("lava_weight", "weights must be nonnegative");
                }
            }
        }
        // Exercise the trainer-side validation once with a representative cell.
        self.train_config(&self.cells()[0]).validate()?;
        Ok(())
    }

    /// All `(objective, seed)` cells in manifest order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        match &self.kind {
            RunKind::Sweep {
                lava_weights,
                battery_weights,
            } => {
                for &battery in battery_weights {
                    for &lava in lava_weights {
                        for &seed in &self.seeds {
                            cells.push(Cell {
                                name: format!("lava{lava}_batt{battery}_seed{seed}"),
                                objective: Objective::FixedWeights { lava, battery },
                                seed,
                            });
                        }
                    }
                }
            }
            RunKind::Constrained {
                lava_threshold,
                battery_threshold,
            } => {
                let fmt = |d: &Option<f64>| match d {
                    Some(v) => format!("{v}"),
                    None => "none".to_string(),
                };
                for &seed in &self.seeds {
                    cells.push(Cell {
                        name: format!(
                            "dlava{}_dbatt{}_seed{seed}",
                            fmt(lava_threshold),
                            fmt(battery_threshold)
                        ),
                        objective: Objective::Constrained {
                            lava_threshold: *lava_threshold,
                            battery_threshold: *battery_threshold,
                        },
                        seed,
                    });
                }
            }
            RunKind::Single {
                lava_weight,
                battery_weight,
            } => {
                for &seed in &self.seeds {
                    cells.push(Cell {
                        name: format!("lava{lava_weight}_batt{battery_weight}_seed{seed}"),
                        objective: Objective::FixedWeights {
                            lava: *lava_weight,
                            battery: *battery_weight,
                        },
                        seed,
                    });
                }
            }
        }
        cells
    }

    /// The full trainer configuration of one cell.
    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            updates: self.updates,
            episodes_per_update: self.episodes_per_update,
            groups: self.groups,
            group_size: self.group_size,
            epochs: self.epochs,
            minibatch_timesteps: self.minibatch_timesteps,
            clip_eps: self.clip_eps,
            entropy_coef: self.entropy_coef,
            policy_lr: self.policy_lr,
            multiplier_lr: self.multiplier_lr,
            multiplier_init_logit: self.multiplier_init_logit,
            kl_coef: self.kl_coef,
            eval_episodes: self.eval_episodes,
            mode: self.mode,
            objective: cell.objective.clone(),
            seed: cell.seed,
            shared_layouts: self.shared_layouts,
            cost_return: self.cost_return,
            checkpoint_every: self.checkpoint_every,
            std_eps: 1e-8,
            grid: GridConfig::default(),
        }
    }

    /// Canonical serialization; `parse(serialize(spec)) == spec`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version = 1");
        match &self.kind {
            RunKind::Sweep {
                lava_weights,
                battery_weights,
            } => {
                let _ = writeln!(s, "kind = sweep");
                let _ = writeln!(s, "lava_weights = {}", join_f64(lava_weights));
                let _ = writeln!(s, "battery_weights = {}", join_f64(battery_weights));
            }
            RunKind::Constrained {
                lava_threshold,
                battery_threshold,
            } => {
                let _ = writeln!(s, "kind = constrained");
                let fmt = |d: &Option<f64>| match d {
                    Some(v) => format!("{v}"),
                    None => "none".to_string(),
                };
                let _ = writeln!(s, "lava_threshold = {}", fmt(lava_threshold));
                let _ = writeln!(s, "battery_threshold = {}", fmt(battery_threshold));
            }
            RunKind::Single {
                lava_weight,
                battery_weight,
            } => {
                let _ = writeln!(s, "kind = single");
                let _ = writeln!(s, "lava_weight = {lava_weight}");
                let _ = writeln!(s, "battery_weight = {battery_weight}");
            }
        }
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "seeds = {}", join_u64(&self.seeds));
        let _ = writeln!(s, "updates = {}", self.updates);
        let _ = writeln!(s, "episodes_per_update = {}", self.episodes_per_update);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "group_size = {}", self.group_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "minibatch_timesteps = {}", self.minibatch_timesteps);
        let _ = writeln!(s, "clip_eps = {}", self.clip_eps);
        let _ = writeln!(s, "entropy_coef = {}", self.entropy_coef);
        let _ = writeln!(s, "policy_lr = {}", self.policy_lr);
        let _ = writeln!(s, "multiplier_lr = {}", self.multiplier_lr);
        let _ = writeln!(s, "multiplier_init_logit = {}", self.multiplier_init_logit);
        let _ = writeln!(s, "kl_coef = {}", self.kl_coef);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "shared_layouts = {}", self.shared_layouts);
        let _ = writeln!(
            s,
            "cost_return = {}",
            match self.cost_return {
                CostReturnMode::Sum => "sum",
                CostReturnMode::MeanRate => "mean-rate",
            }
        );
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", out.display());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ExperimentError::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value`, found {line:?}"),
                });
            };
            let key = key.trim().to_string();
            if pairs.iter().any(|(_, k, _)| *k == key) {
                return Err(ExperimentError::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            pairs.push((i + 1, key, value.trim().to_string()));
        }

        let get = |key: &str| pairs.iter().find(|(_, k, _)| k == key).map(|(_, _, v)| v.as_str());
        let field_err = |field: &str, msg: String| ExperimentError::Field {
            field: field.into(),
            msg,
        };

        match get("version") {
            Some("1") => {}
            Some(other) => {
                return Err(field_err("version", format!("unsupported version {other}")))
            }
            None => return Err(field_err("version", "missing (expected `version = 1`)".into())),
        }

        let mode = match get("mode") {
            Some(m) => AdvantageMode::parse(m).ok_or_else(|| {
                field_err(
                    "mode",
                    format!("unknown mode {m:?} (scalarized-rewards | scalarized-advantages)"),
                )
            })?,
            None => return Err(field_err("mode", "missing".into())),
        };

        let mut spec = if let Some(preset) = get("preset") {
            if get("kind").is_some() {
                return Err(field_err("kind", "conflicts with `preset`".into()));
            }
            ExperimentSpec::preset(preset, mode).ok_or_else(|| {
                field_err(
                    "preset",
                    format!(
                        "unknown preset {preset:?} (full-sweep | thresholds-tight | \
                         thresholds-lava-only | thresholds-mixed)"
                    ),
                )
            })?
        } else {
            let kind = match get("kind") {
                Some("sweep") => RunKind::Sweep {
                    lava_weights: parse_f64_list(get("lava_weights").ok_or_else(|| {
                        field_err("lava_weights", "required for kind = sweep".into())
                    })?)
                    .map_err(|m| field_err("lava_weights", m))?,
                    battery_weights: parse_f64_list(get("battery_weights").ok_or_else(
                        || field_err("battery_weights", "required for kind = sweep".into()),
                    )?)
                    .map_err(|m| field_err("battery_weights", m))?,
                },
                Some("constrained") => RunKind::Constrained {
                    lava_threshold: parse_opt_f64(get("lava_threshold"))
                        .map_err(|m| field_err("lava_threshold", m))?,
                    battery_threshold: parse_opt_f64(get("battery_threshold"))
                        .map_err(|m| field_err("battery_threshold", m))?,
                },
                Some("single") => RunKind::Single {
                    lava_weight: parse_f64(
                        get("lava_weight")
                            .ok_or_else(|| field_err("lava_weight", "required for kind = single".into()))?,
                    )
                    .map_err(|m| field_err("lava_weight", m))?,
                    battery_weight: parse_f64(get("battery_weight").unwrap_or("0"))
                        .map_err(|m| field_err("battery_weight", m))?,
                },
                Some(other) => {
                    return Err(field_err(
                        "kind",
                        format!("unknown kind {other:?} (sweep | constrained | single)"),
                    ))
                }
                None => {
                    return Err(field_err("kind", "missing (or select a preset)".into()));
                }
            };
            ExperimentSpec::new(kind, mode)
        };
        spec.mode = mode;

        let kind_keys: &[&str] = match spec.kind {
            RunKind::Sweep { .. } => &["lava_weights", "battery_weights"],
            RunKind::Constrained { .. } => &["lava_threshold", "battery_threshold"],
            RunKind::Single { .. } => &["lava_weight", "battery_weight"],
        };

        for (line, key, value) in &pairs {
            let parse_err = |msg: String| ExperimentError::Parse {
                line: *line,
                msg: format!("key `{key}`: {msg}"),
            };
            match key.as_str() {
                "version" | "mode" | "kind" | "preset" => {}
                k if kind_keys.contains(&k) => {
                    // Consumed above; presets reject explicit grid keys.
                    if get("preset").is_some() {
                        return Err(parse_err("conflicts with `preset`".into()));
                    }
                }
                "lava_weights" | "battery_weights" | "lava_threshold" | "battery_threshold"
                | "lava_weight" | "battery_weight" => {
                    return Err(parse_err("not valid for this run kind".into()));
                }
                "seeds" => spec.seeds = parse_u64_list(value).map_err(parse_err)?,
                "updates" => spec.updates = parse_u64(value).map_err(parse_err)?,
                "episodes_per_update" => {
                    spec.episodes_per_update = parse_u64(value).map_err(parse_err)? as usize
                }
                "groups" => spec.groups = parse_u64(value).map_err(parse_err)? as usize,
                "group_size" => spec.group_size = parse_u64(value).map_err(parse_err)? as usize,
                "epochs" => spec.epochs = parse_u64(value).map_err(parse_err)? as usize,
                "minibatch_timesteps" => {
                    spec.minibatch_timesteps = parse_u64(value).map_err(parse_err)? as usize
                }
                "clip_eps" => spec.clip_eps = parse_f64(value).map_err(parse_err)?,
                "entropy_coef" => spec.entropy_coef = parse_f64(value).map_err(parse_err)?,
                "policy_lr" => spec.policy_lr = parse_f64(value).map_err(parse_err)?,
                "multiplier_lr" => spec.multiplier_lr = parse_f64(value).map_err(parse_err)?,
                "multiplier_init_logit" => {
                    spec.multiplier_init_logit = parse_f64(value).map_err(parse_err)?
                }
                "kl_coef" => spec.kl_coef = parse_f64(value).map_err(parse_err)?,
                "eval_episodes" => {
                    spec.eval_episodes = parse_u64(value).map_err(parse_err)? as usize
                }
                "checkpoint_every" => {
                    spec.checkpoint_every = parse_u64(value).map_err(parse_err)?
                }
                "shared_layouts" => {
                    spec.shared_layouts = value.parse::<bool>().map_err(|_| {
                        parse_err(format!("expected true/false, found {value:?}"))
                    })?
                }
                "cost_return" => {
                    spec.cost_return = match value.as_str() {
                        "sum" => CostReturnMode::Sum,
                        "mean-rate" => CostReturnMode::MeanRate,
                        other => {
                            return Err(parse_err(format!(
                                "unknown cost_return {other:?} (sum | mean-rate)"
                            )))
                        }
                    }
                }
                "out" => spec.out = Some(PathBuf::from(value)),
                other => {
                    return Err(ExperimentError::Parse {
                        line: *line,
                        msg: format!("unknown key `{other}`"),
                    });
                }
            }
        }

        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Content hash of the canonical serialization.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize().as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifest-version = 1");
        let _ = writeln!(s, "spec-sha256 = {}", self.content_hash());
        let _ = writeln!(s, "cells = {}", self.cells().len());
        s.push_str("[spec]\n");
        s.push_str(&self.serialize());
        s.push_str("[cells]\n");
        for cell in self.cells() {
            let _ = writeln!(s, "{}", cell.name);
        }
        s
    }
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn join_u64(values: &[u64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| format!("expected a number, found {s:?}"))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    s.trim()
        .parse::<u64>()
        .map_err(|_| format!("expected an integer, found {s:?}"))
}

fn parse_opt_f64(s: Option<&str>) -> Result<Option<f64>, String> {
    match s {
        None => Ok(None),
        Some(v) if v.trim() == "none" => Ok(None),
        Some(v) => parse_f64(v).map(Some),
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(parse_f64).collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>, String> {
    s.split(',').map(parse_u64).collect()
}

/// One training run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub objective: Objective,
    pub seed: u64,
}

/// Stochastic-policy evaluation over fresh episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub goal_rate: f64,
    /// Flat per-timestep rates, same estimator as the violation estimate.
    pub lava_rate: f64,
    pub battery_rate: f64,
    pub mean_episode_len: f64,
}

impl EvalReport {
    pub fn serialize(&self) -> String {
        format!(
            "episodes = {}\ngoal_rate = {}\nlava_rate = {}\nbattery_rate = {}\nmean_episode_len = {}\n",
            self.episodes, self.goal_rate, self.lava_rate, self.battery_rate, self.mean_episode_len
        )
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut report = EvalReport {
            episodes: 0,
            goal_rate: f64::NAN,
            lava_rate: f64::NAN,
            battery_rate: f64::NAN,
            mean_episode_len: f64::NAN,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ExperimentError::Parse {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            let value = value.trim();
            let parse_err = |msg: String| ExperimentError::Parse { line: i + 1, msg };
            match key.trim() {
                "episodes" => report.episodes = parse_u64(value).map_err(parse_err)? as usize,
                "goal_rate" => report.goal_rate = parse_f64(value).map_err(parse_err)?,
                "lava_rate" => report.lava_rate = parse_f64(value).map_err(parse_err)?,
                "battery_rate" => report.battery_rate = parse_f64(value).map_err(parse_err)?,
                "mean_episode_len" => {
                    report.mean_episode_len = parse_f64(value).map_err(parse_err)?
                }
                other => {
                    return Err(ExperimentError::Parse {
                        line: i + 1,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(report)
    }
}

/// Evaluates a policy over `episodes` fresh episodes. Actions stay sampled
/// from the policy (stochastic, as trained); episode layouts and sampling
/// streams come from the EVAL domain of `seed`, disjoint from training.
pub fn evaluate(
    params: &MlpParams,
    grid: &GridConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    let mut goals = 0usize;
    let mut steps = 0usize;
    let mut lava_events = 0usize;
    let mut battery_events = 0usize;
    for e in 0..episodes as u64 {
        let layout_seed = rng::derive_seed(seed, &[domain::EVAL, e, 0]);
        let action_seed = rng::derive_seed(seed, &[domain::EVAL, e, 1]);
        let traj = rollout_episode(params, grid, layout_seed, action_seed)?;
        goals += traj.reached_goal as usize;
        steps += traj.len();
        lava_events += traj.cost_events(CH_LAVA);
        battery_events += traj.cost_events(CH_BATTERY);
    }
    Ok(EvalReport {
        episodes,
        goal_rate: goals as f64 / episodes as f64,
        lava_rate: lava_events as f64 / steps as f64,
        battery_rate: battery_events as f64 / steps as f64,
        mean_episode_len: steps as f64 / episodes as f64,
    })
}

/// Per-seed summary row of one finished cell.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub cell: Cell,
    pub eval: EvalReport,
}

pub const SUMMARY_HEADER: &str = "cell,mode,lava_weight,battery_weight,lava_threshold,\
battery_threshold,seed,goal_rate,lava_rate,battery_rate,mean_episode_len";

fn summary_line(mode: AdvantageMode, row: &SummaryRow) -> String {
    let (lw, bw, lt, bt) = match &row.cell.objective {
        Objective::FixedWeights { lava, battery } => {
            (lava.to_string(), battery.to_string(), String::new(), String::new())
        }
        Objective::Constrained {
            lava_threshold,
            battery_threshold,
        } => (
            String::new(),
            String::new(),
            lava_threshold.map(|v| v.to_string()).unwrap_or_default(),
            battery_threshold.map(|v| v.to_string()).unwrap_or_default(),
        ),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        row.cell.name,
        mode.as_str(),
        lw,
        bw,
        lt,
        bt,
        row.cell.seed,
        row.eval.goal_rate,
        row.eval.lava_rate,
        row.eval.battery_rate,
        row.eval.mean_episode_len
    )
}

/// Runs (or resumes) every cell of the spec into `out_dir`.
///
/// `workers > 1` executes cells on a bounded rayon pool; each cell is fully
/// isolated (own directory, own RNG domains), so outputs are identical to the
/// sequential schedule. Returns the per-seed summary rows in manifest order.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    workers: usize,
    resume: bool,
) -> Result<Vec<SummaryRow>, ExperimentError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let manifest_path = out_dir.join("manifest.txt");
    let manifest = spec.manifest();
    if manifest_path.exists() {
        let existing = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        if existing != manifest {
            return Err(ExperimentError::ManifestMismatch);
        }
    } else {
        fs::write(&manifest_path, &manifest).map_err(io_err(&manifest_path))?;
    }

    let cells = spec.cells();
    let run_cell = |cell: &Cell| -> Result<SummaryRow, ExperimentError> {
        let eval = run_single_cell(spec, cell, &out_dir.join(&cell.name), resume)?;
        Ok(SummaryRow {
            cell: cell.clone(),
            eval,
        })
    };

    let rows: Vec<SummaryRow> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| {
            use rayon::prelude::*;
            cells.par_iter().map(run_cell).collect::<Result<Vec<_>, _>>()
        })?
    } else {
        cells.iter().map(run_cell).collect::<Result<Vec<_>, _>>()?
    };

    write_summaries(spec, out_dir, &rows)?;
    Ok(rows)
}

/// Trains one cell (resuming from its checkpoint when asked), evaluates the
/// final policy, and writes `eval.txt`. Skips training when a matching eval
/// report already exists under `resume`.
pub fn run_single_cell(
    spec: &ExperimentSpec,
    cell: &Cell,
    cell_dir: &Path,
    resume: bool,
) -> Result<EvalReport, ExperimentError> {
    let eval_path = cell_dir.join("eval.txt");
    if resume && eval_path.exists() {
        let text = fs::read_to_string(&eval_path).map_err(io_err(&eval_path))?;
        return EvalReport::parse(&text);
    }
    fs::create_dir_all(cell_dir).map_err(io_err(cell_dir))?;
    let cfg = spec.train_config(cell);
    fs::write(cell_dir.join("config.txt"), render_train_config(&cfg))
        .map_err(io_err(cell_dir))?;
    let mut trainer = if resume {
        Trainer::new_or_resume(cfg.clone(), cell_dir)?
    } else {
        Trainer::new(cfg.clone())?
    };
    trainer.run(cell_dir)?;
    let eval = evaluate(&trainer.params, &cfg.grid, cfg.eval_episodes, cfg.seed)?;
    fs::write(&eval_path, eval.serialize()).map_err(io_err(&eval_path))?;
    Ok(eval)
}

/// Human-readable resolved config dropped next to each run.
fn render_train_config(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode = {}", cfg.mode.as_str());
    match &cfg.objective {
        Objective::FixedWeights { lava, battery } => {
            let _ = writeln!(s, "objective = fixed-weights");
            let _ = writeln!(s, "lava_weight = {lava}");
            let _ = writeln!(s, "battery_weight = {battery}");
        }
        Objective::Constrained {
            lava_threshold,
            battery_threshold,
        } => {
            let _ = writeln!(s, "objective = constrained");
            let fmt = |d: &Option<f64>| d.map(|v| v.to_string()).unwrap_or("none".into());
            let _ = writeln!(s, "lava_threshold = {}", fmt(lava_threshold));
            let _ = writeln!(s, "battery_threshold = {}", fmt(battery_threshold));
        }
    }
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "updates = {}", cfg.updates);
    let _ = writeln!(s, "episodes_per_update = {}", cfg.episodes_per_update);
    let _ = writeln!(s, "groups = {}", cfg.groups);
    let _ = writeln!(s, "group_size = {}", cfg.group_size);
    let _ = writeln!(s, "epochs = {}", cfg.epochs);
    let _ = writeln!(s, "minibatch_timesteps = {}", cfg.minibatch_timesteps);
    let _ = writeln!(s, "clip_eps = {}", cfg.clip_eps);
    let _ = writeln!(s, "entropy_coef = {}", cfg.entropy_coef);
    let _ = writeln!(s, "policy_lr = {}", cfg.policy_lr);
    let _ = writeln!(s, "multiplier_lr = {}", cfg.multiplier_lr);
    let _ = writeln!(s, "kl_coef = {}", cfg.kl_coef);
    let _ = writeln!(s, "eval_episodes = {}", cfg.eval_episodes);
    s
}

/// Writes `summary.csv` (per seed) and `summary_agg.csv` (mean, sample std
/// and stderr over seeds per config point).
pub fn write_summaries(
    spec: &ExperimentSpec,
    out_dir: &Path,
    rows: &[SummaryRow],
) -> Result<(), ExperimentError> {
    let path = out_dir.join("summary.csv");
    let mut text = String::from(SUMMARY_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&summary_line(spec.mode, row));
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))?;

    // Aggregate over seeds per config point, in first-seen order.
    let mut points: Vec<(String, Vec<&SummaryRow>)> = Vec::new();
    for row in rows {
        let key = match &row.cell.objective {
            Objective::FixedWeights { lava, battery } => format!("{lava},{battery},,"),
            Objective::Constrained {
                lava_threshold,
                battery_threshold,
            } => format!(
                ",,{},{}",
                lava_threshold.map(|v| v.to_string()).unwrap_or_default(),
                battery_threshold.map(|v| v.to_string()).unwrap_or_default()
            ),
        };
        match points.iter_mut().find(|(k, _)| *k == key) {
            Some((_, group)) => group.push(row),
            None => points.push((key, vec![row])),
        }
    }

    let mut agg = String::from(
        "mode,lava_weight,battery_weight,lava_threshold,battery_threshold,seeds,\
goal_rate_mean,goal_rate_std,goal_rate_stderr,\
lava_rate_mean,lava_rate_std,lava_rate_stderr,\
battery_rate_mean,battery_rate_std,battery_rate_stderr,\
mean_episode_len_mean,mean_episode_len_std,mean_episode_len_stderr\n",
    );
    for (key, group) in &points {
        let n = group.len() as f64;
        let stats = |select: &dyn Fn(&EvalReport) -> f64| {
            let values: Vec<f64> = group.iter().map(|r| select(&r.eval)).collect();
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (mean, std, std / n.sqrt())
        };
        let (gm, gs, ge) = stats(&|e| e.goal_rate);
        let (lm, ls, le) = stats(&|e| e.lava_rate);
        let (bm, bs, be) = stats(&|e| e.battery_rate);
        let (mm, ms, me) = stats(&|e| e.mean_episode_len);
        let _ = writeln!(
            agg,
            "{},{key},{},{gm},{gs},{ge},{lm},{ls},{le},{bm},{bs},{be},{mm},{ms},{me}",
            spec.mode.as_str(),
            group.len(),
        );
    }
    let agg_path = out_dir.join("summary_agg.csv");
    fs::write(&agg_path, agg).map_err(io_err(&agg_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_spec() -> ExperimentSpec {
        let mut spec = ExperimentSpec::preset("full-sweep", AdvantageMode::ScalarizedRewards)
            .unwrap();
        spec.updates = 2;
        spec
    }

    #[test]
    fn full_sweep_preset_enumerates_ninety_cells() {
        let spec =
            ExperimentSpec::preset("full-sweep", AdvantageMode::ScalarizedRewards).unwrap();
        match &spec.kind {
            RunKind::Sweep {
                lava_weights,
                battery_weights,
            } => {
                assert_eq!(
                    lava_weights,
                    &[0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0]
                );
                assert_eq!(battery_weights, &[0.0, 0.1]);
            }
            other => panic!("expected sweep, got {other:?}"),
        }
        assert_eq!(spec.seeds.len(), 5);
        assert_eq!(spec.updates, 8000);
        assert_eq!(spec.cells().len(), 9 * 2 * 5);
        let manifest = spec.manifest();
        assert!(manifest.contains("cells = 90"));
        assert!(manifest.contains("lava0.01_batt0.1_seed3"));
    }

    #[test]
    fn spec_round_trips_through_serialization() {
        for spec in [
            sweep_spec(),
            ExperimentSpec::preset("thresholds-tight", AdvantageMode::ScalarizedAdvantages)
                .unwrap(),
            ExperimentSpec::preset("thresholds-lava-only", AdvantageMode::ScalarizedRewards)
                .unwrap(),
            ExperimentSpec::new(
                RunKind::Single {
                    lava_weight: 0.1,
                    battery_weight: 0.0,
                },
                AdvantageMode::ScalarizedAdvantages,
            ),
        ] {
            let parsed = ExperimentSpec::parse(&spec.serialize()).unwrap();
            assert_eq!(parsed, spec);
            assert_eq!(parsed.content_hash(), spec.content_hash());
        }
    }

    #[test]
    fn manifest_hash_is_reproducible_and_spec_sensitive() {
        let a = sweep_spec();
        let b = sweep_spec();
        assert_eq!(a.content_hash(), b.content_hash());
        let mut c = sweep_spec();
        c.updates = 3;
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn empty_seeds_are_rejected() {
        let mut spec = sweep_spec();
        spec.seeds.clear();
        match spec.validate() {
            Err(ExperimentError::Field { field, .. }) => assert_eq!(field, "seeds"),
            other => panic!("expected field error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let text = "version = 1\nkind = single\nmode = scadv\nlava_weight = 0.1\nlava_wieght = 2\n";
        match ExperimentSpec::parse(text) {
            Err(ExperimentError::Parse { msg, .. }) => assert!(msg.contains("lava_wieght")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn preset_conflicts_are_rejected() {
        let text = "version = 1\npreset = thresholds-tight\nkind = sweep\nmode = scadv\n";
        match ExperimentSpec::parse(text) {
            Err(ExperimentError::Field { field, msg }) => {
                assert_eq!(field, "kind");
                assert!(msg.contains("preset"));
            }
            other => panic!("expected field error, got {other:?}"),
        }
        let text = "version = 1\npreset = thresholds-tight\nmode = scadv\nlava_threshold = 0.5\n";
        assert!(ExperimentSpec::parse(text).is_err());
    }

    #[test]
    fn kind_mismatched_keys_are_rejected() {
        let text = "version = 1\nkind = single\nmode = scadv\nlava_weight = 0.1\nlava_threshold = 0.01\n";
        match ExperimentSpec::parse(text) {
            Err(ExperimentError::Parse { msg, .. }) => {
                assert!(msg.contains("not valid for this run kind"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_disjoint_from_training() {
        let params = MlpParams::init(3);
        let grid = GridConfig::default();
        let a = evaluate(&params, &grid, 50, 11).unwrap();
        let b = evaluate(&params, &grid, 50, 11).unwrap();
        assert_eq!(a, b);
        // Eval layouts come from the EVAL domain, not the training LAYOUT one.
        assert_ne!(
            rng::derive_seed(11, &[domain::EVAL, 0, 0]),
            rng::derive_seed(11, &[domain::LAYOUT, 0, 0])
        );
    }

    #[test]
    fn eval_report_round_trips() {
        let report = EvalReport {
            episodes: 1000,
            goal_rate: 0.83,
            lava_rate: 0.0123,
            battery_rate: 0.002,
            mean_episode_len: 14.25,
        };
        assert_eq!(EvalReport::parse(&report.serialize()).unwrap(), report);
    }

    #[test]
    fn tiny_experiment_runs_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(
            RunKind::Single {
                lava_weight: 0.0,
                battery_weight: 0.0,
            },
            AdvantageMode::ScalarizedAdvantages,
        );
        spec.seeds = vec![0, 1];
        spec.updates = 2;
        spec.eval_episodes = 20;
        spec.checkpoint_every = 1;

        let rows = run_experiment(&spec, dir.path(), 1, false).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(dir.path().join("manifest.txt").exists());
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("summary_agg.csv").exists());
        let cell_dir = dir.path().join(&rows[0].cell.name);
        assert!(cell_dir.join("metrics.csv").exists());
        assert!(cell_dir.join("policy_final.ckpt").exists());

        // Resume with everything finished: same summary, no retraining.
        let summary_before = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let rows2 = run_experiment(&spec, dir.path(), 1, true).unwrap();
        assert_eq!(rows2.len(), 2);
        let summary_after = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary_before, summary_after);

        // A different spec in the same directory is refused.
        spec.updates = 3;
        match run_experiment(&spec, dir.path(), 1, true) {
            Err(ExperimentError::ManifestMismatch) => {}
            other => panic!("expected manifest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn parallel_and_sequential_cells_produce_identical_outputs() {
        let mut spec = ExperimentSpec::new(
            RunKind::Single {
                lava_weight: 0.05,
                battery_weight: 0.0,
            },
            AdvantageMode::ScalarizedRewards,
        );
        spec.seeds = vec![0, 1, 2];
        spec.updates = 2;
        spec.eval_episodes = 10;

        let seq_dir = tempfile::tempdir().unwrap();
        let par_dir = tempfile::tempdir().unwrap();
        run_experiment(&spec, seq_dir.path(), 1, false).unwrap();
        run_experiment(&spec, par_dir.path(), 3, false).unwrap();
        for name in ["summary.csv", "summary_agg.csv"] {
            let a = fs::read_to_string(seq_dir.path().join(name)).unwrap();
            let b = fs::read_to_string(par_dir.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        for cell in spec.cells() {
            let a = fs::read_to_string(seq_dir.path().join(&cell.name).join("metrics.csv")).unwrap();
            let b = fs::read_to_string(par_dir.path().join(&cell.name).join("metrics.csv")).unwrap();
            assert_eq!(a, b, "metrics differ for {}", cell.name);
        }
    }
}
