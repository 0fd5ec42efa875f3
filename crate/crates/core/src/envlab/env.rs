use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EnvKind, MdpSpec, LINE_GOAL, LINE_GOAL_HALF_WIDTH, LINE_START_MAX, LINE_STEP};
use crate::error::{LabError, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub s_next: Vec<f64>,
    pub r: f64,
    pub terminal: bool,
}

/// A validated MDP instance. Stateless: the caller owns the current state.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: MdpSpec,
}

impl Environment {
    pub fn new(spec: MdpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    pub fn reset(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.spec.kind {
            EnvKind::GridWorld => {
                if !self.spec.random_start {
                    return vec![0.0, 0.0];
                }
                let open: Vec<[usize; 2]> = self.open_cells().collect();
                let c = open[rng.gen_range(0..open.len())];
                vec![c[0] as f64, c[1] as f64]
            }
            EnvKind::LineWorld => {
                if self.spec.random_start {
                    vec![rng.gen_range(0.0..LINE_START_MAX)]
                } else {
                    vec![0.0]
                }
            }
        }
    }

    pub fn reset_seeded(&self, seed: u64) -> Vec<f64> {
        self.reset(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// One transition. Noise (if any) is drawn from `rng`.
    pub fn step(&self, state: &[f64], action: usize, rng: &mut impl Rng) -> StepOutcome {
        let noise = if self.spec.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            self.spec.noise_std * z
        } else {
            0.0
        };
        self.step_with_noise(state, action, noise)
    }

    /// Deterministic core of [`Environment::step`]: `noise` is the already-scaled
    /// draw (state units for LineWorld, reward units for GridWorld).
    pub fn step_with_noise(&self, state: &[f64], action: usize, noise: f64) -> StepOutcome {
        let rw = &self.spec.reward;
        match self.spec.kind {
            EnvKind::GridWorld => {
                let cell = self.cell_of(state);
                let next = self.grid_move(cell, action);
                let (r, terminal) = if next == self.spec.goal {
                    (rw.goal_reward, true)
                } else if self.spec.hazards.contains(&next) {
                    (-rw.hazard_cost, true)
                } else {
                    (-rw.step_cost, false)
                };
                StepOutcome {
                    s_next: vec![next[0] as f64, next[1] as f64],
                    r: r + noise,
                    terminal,
                }
            }
            EnvKind::LineWorld => {
                let dir = if action == 1 { LINE_STEP } else { -LINE_STEP };
                let x = (state[0] + dir + noise).clamp(0.0, 1.0);
                let terminal = (x - LINE_GOAL).abs() < LINE_GOAL_HALF_WIDTH;
                let r = if terminal { rw.goal_reward } else { -rw.step_cost };
                StepOutcome {
                    s_next: vec![x],
                    r,
                    terminal,
                }
            }
        }
    }

    /// Nearest grid cell of a (possibly non-integer) GridWorld state.
    pub fn cell_of(&self, state: &[f64]) -> [usize; 2] {
        let max = (self.spec.grid_size - 1) as f64;
        let c = |v: f64| v.round().clamp(0.0, max) as usize;
        [c(state[0]), c(state[1])]
    }

    pub fn is_terminal_cell(&self, cell: [usize; 2]) -> bool {
        cell == self.spec.goal || self.spec.hazards.contains(&cell)
    }

    pub(crate) fn open_cells(&self) -> impl Iterator<Item = [usize; 2]> + '_ {
        let n = self.spec.grid_size;
        (0..n)
            .flat_map(move |y| (0..n).map(move |x| [x, y]))
            .filter(|c| !self.is_terminal_cell(*c))
    }

    /// Actions: 0 up (+y), 1 down (-y), 2 left (-x), 3 right (+x). Walls block.
    pub(crate) fn grid_move(&self, cell: [usize; 2], action: usize) -> [usize; 2] {
        let max = self.spec.grid_size - 1;
        let [x, y] = cell;
        match action {
            0 => [x, (y + 1).min(max)],
            1 => [x, y.saturating_sub(1)],
            2 => [x.saturating_sub(1), y],
            _ => [(x + 1).min(max), y],
        }
    }
}

/// A deterministic state-to-action map.
pub trait Policy: Sync {
    fn act(&self, state: &[f64]) -> usize;
}

/// Adapts a closure into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&[f64]) -> usize + Sync> Policy for FnPolicy<F> {
    fn act(&self, state: &[f64]) -> usize {
        (self.0)(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanReturn {
    pub mean: f64,
    /// Standard error of the mean; `None` for a single episode.
    pub se: Option<f64>,
    pub n_episodes: usize,
}

/// Runs one episode and returns its undiscounted return.
pub fn rollout(env: &Environment, policy: &dyn Policy, rng: &mut impl Rng) -> f64 {
    let mut s = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.spec().horizon {
        let a = policy.act(&s);
        let out = env.step(&s, a, rng);
        total += out.r;
        if out.terminal {
            break;
        }
        s = out.s_next;
    }
    total
}

/// Mean undiscounted return over `n_episodes` seeded rollouts. Episode `i` uses its
/// own stream derived from `seed`, so the result does not depend on scheduling.
pub fn evaluate_policy(
    env: &Environment,
    policy: &dyn Policy,
    n_episodes: usize,
    seed: u64,
) -> Result<MeanReturn> {
    if n_episodes == 0 {
        return Err(LabError::Argument("n_episodes must be at least 1".into()));
    }
    let returns = par::map_range(n_episodes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, i as u64));
        rollout(env, policy, &mut rng)
    });
    Ok(summarize(&returns))
}

pub(crate) fn summarize(values: &[f64]) -> MeanReturn {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    MeanReturn {
        mean,
        se,
        n_episodes: n,
    }
}
