//! Lava/battery gridworld.
//!
//! A 10x10 grid with uniformly sampled agent start and goal. 20% of the
//! tiles are lava; stepping onto lava emits a unit cost. The battery drains
//! 5% on every move and recharges 20% net on `Stay`; a second cost channel
//! fires on any step that ends with the charge below 10%. Reaching the goal
//! yields a sparse terminal reward of 1.0 and episodes truncate at 80 steps.
//!
//! Everything is a pure function of `(seed, action sequence)`: identical
//! inputs reproduce every transition bit-exactly, so episodes can run in
//! parallel as long as each one owns its state.

use rand::Rng;
use thiserror::Error;

use crate::rng;

/// Observation width: agent xy, goal xy, battery, flattened 5x5 lava window.
pub const OBS_DIM: usize = 30;
/// Side length of the local lava window.
const WINDOW: i64 = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    /// `step` was called on an episode that already terminated or truncated.
    #[error("step called on a finished episode (step_count {step_count})")]
    EpisodeFinished { step_count: u32 },
}

/// Static environment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    /// Fraction of cells designated lava at reset.
    pub lava_fraction: f64,
    pub max_steps: u32,
    /// Battery drained by each movement action.
    pub battery_drain: f64,
    /// Net battery gained by `Stay`.
    pub battery_recharge: f64,
    /// Battery level below which the battery cost fires.
    pub battery_low_threshold: f64,
    /// Terminal reward for reaching the goal.
    pub goal_reward: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            lava_fraction: 0.20,
            max_steps: 80,
            battery_drain: 0.05,
            battery_recharge: 0.20,
            battery_low_threshold: 0.10,
            goal_reward: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width < 2 || self.height < 2 {
            return Err("grid must be at least 2x2".into());
        }
        if !(0.0..1.0).contains(&self.lava_fraction) {
            return Err("lava_fraction must be in [0, 1)".into());
        }
        if self.max_steps < 1 {
            return Err("max_steps must be >= 1".into());
        }
        for (name, v) in [
            ("battery_drain", self.battery_drain),
            ("battery_recharge", self.battery_recharge),
            ("battery_low_threshold", self.battery_low_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn num_lava(&self) -> usize {
        (self.lava_fraction * self.num_cells() as f64).round() as usize
    }
}

/// The five discrete actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Action {
    North = 0,
    South = 1,
    East = 2,
    West = 3,
    Stay = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::North,
        Action::South,
        Action::East,
        Action::West,
        Action::Stay,
    ];

    pub const COUNT: usize = 5;

    /// (dx, dy); north increases y.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::North => (0, 1),
            Action::South => (0, -1),
            Action::East => (1, 0),
            Action::West => (-1, 0),
            Action::Stay => (0, 0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Action> {
        Action::ALL.get(idx).copied()
    }
}

/// Full mutable episode state.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub agent_pos: (usize, usize),
    pub goal_pos: (usize, usize),
    pub battery: f64,
    /// Row-major `width * height` lava flags, indexed `y * width + x`.
    pub lava_mask: Vec<bool>,
    pub step_count: u32,
    pub done: bool,
}

/// What one transition emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    /// 1 iff the post-move cell is lava.
    pub cost_lava: bool,
    /// 1 iff the post-step battery is below the low threshold.
    pub cost_battery: bool,
    pub terminal: bool,
    pub truncated: bool,
}

/// Flat 30-dimensional feature vector.
///
/// Layout: agent x, agent y, goal x, goal y (each normalized by
/// `dimension - 1`), battery, then the 5x5 lava window centered on the agent
/// in row-major order (rows are ascending y, columns ascending x;
/// out-of-grid cells are 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One environment instance: config plus current episode state.
#[derive(Debug, Clone)]
pub struct GridWorld {
    config: GridConfig,
    state: EpisodeState,
}

impl GridWorld {
    /// Starts a fresh episode from `seed`.
    ///
    /// Sampling order is frozen: goal cell uniform over all cells, then
    /// `round(lava_fraction * cells)` lava cells without replacement from the
    /// non-goal cells, then the agent start uniform over non-goal cells (the
    /// start may be lava; no cost is emitted until a step lands on lava).
    pub fn reset(config: GridConfig, seed: u64) -> (Self, Observation) {
        debug_assert!(config.validate().is_ok());
        let cells = config.num_cells();
        let mut rng = rng::stream(seed, &[]);

        let goal_idx = rng.gen_range(0..cells);
        // Indices into the non-goal cells; shift past the goal to map back.
        let skip_goal = |idx: usize| if idx >= goal_idx { idx + 1 } else { idx };

        let mut lava_mask = vec![false; cells];
        for idx in rand::seq::index::sample(&mut rng, cells - 1, config.num_lava()) {
            lava_mask[skip_goal(idx)] = true;
        }

        let agent_idx = skip_goal(rng.gen_range(0..cells - 1));

        let state = EpisodeState {
            agent_pos: (agent_idx % config.width, agent_idx / config.width),
            goal_pos: (goal_idx % config.width, goal_idx / config.width),
            battery: 1.0,
            lava_mask,
            step_count: 0,
            done: false,
        };
        let obs = observe(&config, &state);
        (Self { config, state }, obs)
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    /// Applies one action. Errors if the episode already finished.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeFinished {
                step_count: self.state.step_count,
            });
        }
        let cfg = &self.config;
        let st = &mut self.state;

        let (dx, dy) = action.delta();
        let nx = (st.agent_pos.0 as i64 + dx).clamp(0, cfg.width as i64 - 1) as usize;
        let ny = (st.agent_pos.1 as i64 + dy).clamp(0, cfg.height as i64 - 1) as usize;
        st.agent_pos = (nx, ny);

        // Moves drain even when clamped at the boundary; Stay recharges net.
        st.battery = match action {
            Action::Stay => (st.battery + cfg.battery_recharge).min(1.0),
            _ => (st.battery - cfg.battery_drain).max(0.0),
        };

        st.step_count += 1;
        let terminal = st.agent_pos == st.goal_pos;
        let truncated = !terminal && st.step_count >= cfg.max_steps;
        st.done = terminal || truncated;

        let outcome = StepOutcome {
            observation: observe(cfg, st),
            reward: if terminal { cfg.goal_reward } else { 0.0 },
            cost_lava: st.lava_mask[ny * cfg.width + nx],
            cost_battery: st.battery < cfg.battery_low_threshold,
            terminal,
            truncated,
        };
        Ok(outcome)
    }

    pub fn observe(&self) -> Observation {
        observe(&self.config, &self.state)
    }

    /// Debug rendering: `A` agent, `G` goal, `#` lava, `.` empty.
    /// Highest y prints first so north is up.
    pub fn render_ascii(&self) -> String {
        let (cfg, st) = (&self.config, &self.state);
        let mut out = String::with_capacity((cfg.width + 1) * cfg.height);
        for y in (0..cfg.height).rev() {
            for x in 0..cfg.width {
                let ch = if (x, y) == st.agent_pos {
                    'A'
                } else if (x, y) == st.goal_pos {
                    'G'
                } else if st.lava_mask[y * cfg.width + x] {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Deterministic observation of a state.
pub fn observe(config: &GridConfig, state: &EpisodeState) -> Observation {
    let mut v = [0.0; OBS_DIM];
    let (ax, ay) = state.agent_pos;
    let (gx, gy) = state.goal_pos;
    v[0] = ax as f64 / (config.width - 1) as f64;
    v[1] = ay as f64 / (config.height - 1) as f64;
    v[2] = gx as f64 / (config.width - 1) as f64;
    v[3] = gy as f64 / (config.height - 1) as f64;
    v[4] = state.battery;

    let half = WINDOW / 2;
    let mut i = 5;
    for dy in -half..=half {
        for dx in -half..=half {
            let x = ax as i64 + dx;
            let y = ay as i64 + dy;
            let in_grid =
                x >= 0 && x < config.width as i64 && y >= 0 && y < config.height as i64;
            if in_grid && state.lava_mask[y as usize * config.width + x as usize] {
                v[i] = 1.0;
            }
            i += 1;
        }
    }
    Observation(v)
}
