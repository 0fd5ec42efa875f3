//! Small, fully specified MDPs with exact planning oracles and behavior-policy
//! dataset generation.
//!
//! Two environment families are provided:
//!
//! * `GridWorld`: an `N x N` grid, four actions (up/down/left/right), a terminal
//!   goal cell and terminal hazard cells. Dynamics are deterministic; the
//!   optional `noise_std` adds Gaussian noise to the observed reward.
//! * `LineWorld`: a continuous state `x` in `[0, 1]`, two actions moving `x` by
//!   `-/+ 0.05` plus Gaussian noise, terminal reward when `|x - 0.9| < 0.05`.

mod dataset;
mod env;
mod oracle;

pub use dataset::{
    episode_returns, generate_dataset, BehaviorQuality, Transition, TransitionDataset,
    MEDIUM_EPSILON,
};
pub use env::{evaluate_policy, Environment, FnPolicy, MeanReturn, Policy, StepOutcome};
pub use oracle::{value_iteration_oracle, OptimalValues};

pub(crate) use oracle::argmax_first;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// LineWorld step size per action.
pub const LINE_STEP: f64 = 0.05;
/// Center of the LineWorld goal zone.
pub const LINE_GOAL: f64 = 0.9;
/// Half-width of the LineWorld goal zone.
pub const LINE_GOAL_HALF_WIDTH: f64 = 0.05;
/// Upper end of the LineWorld start distribution `U[0, LINE_START_MAX)`.
pub const LINE_START_MAX: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    GridWorld,
    LineWorld,
}

/// Rewards are `goal_reward` on reaching the goal, `-hazard_cost` on entering a
/// hazard, and `-step_cost` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub goal_reward: f64,
    pub step_cost: f64,
    pub hazard_cost: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            goal_reward: 1.0,
            step_cost: 0.01,
            hazard_cost: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub horizon: usize,
    #[serde(default)]
    pub reward: RewardSpec,
    /// LineWorld: transition noise std (state units). GridWorld: reward noise std.
    pub noise_std: f64,
    pub seed: u64,
    /// GridWorld side length; ignored for LineWorld.
    #[serde(default)]
    pub grid_size: usize,
    /// GridWorld goal cell `[x, y]`.
    #[serde(default)]
    pub goal: [usize; 2],
    /// GridWorld hazard cells.
    #[serde(default)]
    pub hazards: Vec<[usize; 2]>,
    /// Episodes start at a uniformly random non-terminal state when true,
    /// otherwise at the origin.
    #[serde(default = "default_true")]
    pub random_start: bool,
}

fn default_true() -> bool {
    true
}

impl MdpSpec {
    /// `size x size` grid, goal in the far corner, a diagonal of hazards off the main paths.
    pub fn grid_world(size: usize, seed: u64) -> Self {
        let hazards = if size >= 5 {
            vec![[size / 2, size / 2], [1, size - 2], [size - 2, 1]]
        } else {
            Vec::new()
        };
        Self {
            kind: EnvKind::GridWorld,
            state_dim: 2,
            n_actions: 4,
            gamma: 0.9,
            horizon: 4 * size * size,
            reward: RewardSpec::default(),
            noise_std: 0.0,
            seed,
            grid_size: size,
            goal: [size.saturating_sub(1), size.saturating_sub(1)],
            hazards,
            random_start: true,
        }
    }

    pub fn line_world(seed: u64) -> Self {
        Self {
            kind: EnvKind::LineWorld,
            state_dim: 1,
            n_actions: 2,
            gamma: 0.95,
            horizon: 100,
            reward: RewardSpec::default(),
            noise_std: 0.01,
            seed,
            grid_size: 0,
            goal: [0, 0],
            hazards: Vec::new(),
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(LabError::config("gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        if self.horizon < 1 {
            return Err(LabError::config("horizon", "must be at least 1"));
        }
        if self.n_actions < 2 {
            return Err(LabError::config("n_actions", "must be at least 2"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(LabError::config("noise_std", "must be finite and non-negative"));
        }
        let r = &self.reward;
        if !(r.goal_reward.is_finite() && r.step_cost.is_finite() && r.hazard_cost.is_finite()) {
            return Err(LabError::config("reward", "all reward parameters must be finite"));
        }
        match self.kind {
            EnvKind::GridWorld => {
                if self.state_dim != 2 {
                    return Err(LabError::config("state_dim", "GridWorld has 2 state coordinates"));
                }
                if self.n_actions != 4 {
                    return Err(LabError::config("n_actions", "GridWorld has exactly 4 actions"));
                }
                if self.grid_size < 2 {
                    return Err(LabError::config("grid_size", "must be at least 2"));
                }
                let inside = |c: &[usize; 2]| c[0] < self.grid_size && c[1] < self.grid_size;
                if !inside(&self.goal) {
                    return Err(LabError::config("goal", "goal cell lies outside the grid"));
                }
                if let Some(h) = self.hazards.iter().find(|h| !inside(h) || **h == self.goal) {
                    return Err(LabError::config(
                        "hazards",
                        format!("hazard {h:?} lies outside the grid or on the goal"),
                    ));
                }
            }
            EnvKind::LineWorld => {
                if self.state_dim != 1 {
                    return Err(LabError::config("state_dim", "LineWorld has 1 state coordinate"));
                }
                if self.n_actions != 2 {
                    return Err(LabError::config("n_actions", "LineWorld has exactly 2 actions"));
                }
            }
        }
        Ok(())
    }

    /// Valid box of the state space, per coordinate.
    pub fn state_bounds(&self) -> Vec<(f64, f64)> {
        match self.kind {
            EnvKind::GridWorld => vec![(0.0, (self.grid_size - 1) as f64); 2],
            EnvKind::LineWorld => vec![(0.0, 1.0)],
        }
    }

    /// Clips a state into the valid box.
    pub fn clip_state(&self, s: &mut [f64]) {
        for (x, (lo, hi)) in s.iter_mut().zip(self.state_bounds()) {
            *x = x.clamp(lo, hi);
        }
    }
}
