//! Constrained group-relative policy optimization (constrained GRPO).
//!
//! A critic-free policy-gradient trainer that enforces behavioral constraints
//! through indicator cost channels and learned Lagrangian multipliers. Two
//! advantage constructions are provided:
//!
//! - **Scalarized rewards**: combine reward and cost returns into one scalar
//!   with the current multipliers, then standardize within the group. The
//!   group standardization implicitly rescales each component by
//!   `lambda_j * sigma_j / sigma_RS`, so within-group variances and
//!   correlations distort the intended trade-off.
//! - **Scalarized advantages**: standardize each component within the group
//!   first, then combine the standardized components with the multipliers.
//!   The multipliers act directly as the effective weights.
//!
//! The crate ships a deterministic 10x10 lava/battery gridworld, a small MLP
//! policy with hand-derived backprop, the GRPO clipped-surrogate trainer, a
//! Lagrangian multiplier controller over indicator violation rates, and an
//! experiment runner (`cgrpo` binary) that reproduces the fixed-weight sweep
//! and constrained-training dynamics at configurable budgets.

pub mod advantage;
pub mod checkpoint;
pub mod experiment;
pub mod gridworld;
pub mod lagrangian;
pub mod metrics;
pub mod optim;
pub mod plot;
pub mod policy;
pub mod rng;
pub mod theorem;
pub mod trainer;

pub use advantage::AdvantageMode;
pub use gridworld::{Action, GridConfig, GridWorld, Observation, StepOutcome};
pub use policy::MlpParams;
pub use trainer::{TrainConfig, Trainer};
