use nalgebra::{DMatrix, SymmetricEigen};

use super::env::{Environment, Policy};
use super::EnvKind;
use crate::error::{LabError, Result};

const MAX_SWEEPS: usize = 100_000;
const QUADRATURE_NODES: usize = 9;

/// Optimal values on the (discretized) state space.
///
/// GridWorld states are the cells in row-major order (`y * N + x`); terminal cells
/// carry zero value. LineWorld states are `grid_resolution` evenly spaced points on
/// `[0, 1]`, and queries between points are linearly interpolated.
#[derive(Debug, Clone)]
pub struct OptimalValues {
    pub kind: EnvKind,
    pub states: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub policy: Vec<usize>,
    /// Max-norm update of each sweep.
    pub residuals: Vec<f64>,
    grid_size: usize,
}

impl OptimalValues {
    /// Q*(s, ·) at an arbitrary state.
    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::GridWorld => {
                let max = (self.grid_size - 1) as f64;
                let x = state[0].round().clamp(0.0, max) as usize;
                let y = state[1].round().clamp(0.0, max) as usize;
                self.q[y * self.grid_size + x].clone()
            }
            EnvKind::LineWorld => {
                let (lo, frac) = locate(state[0], self.states.len());
                let hi = (lo + 1).min(self.states.len() - 1);
                self.q[lo]
                    .iter()
                    .zip(&self.q[hi])
                    .map(|(a, b)| a + frac * (b - a))
                    .collect()
            }
        }
    }

    pub fn value(&self, state: &[f64]) -> f64 {
        self.q_values(state).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Max over states of `|V(s) - max_a Q(s, a)|`, ignoring terminal GridWorld cells.
    pub fn bellman_gap(&self) -> f64 {
        self.v
            .iter()
            .zip(&self.q)
            .map(|(v, q)| (v - q.iter().copied().fold(f64::NEG_INFINITY, f64::max)).abs())
            .fold(0.0, f64::max)
    }
}

impl Policy for OptimalValues {
    fn act(&self, state: &[f64]) -> usize {
        argmax_first(&self.q_values(state))
    }
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the grid interval containing `x` on `n` points over `[0, 1]`, plus the
/// interpolation weight of the upper end.
fn locate(x: f64, n: usize) -> (usize, f64) {
    let pos = x.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = (pos.floor() as usize).min(n - 2);
    (lo, pos - lo as f64)
}

/// Value iteration until the max-norm update falls below `tol`.
pub fn value_iteration_oracle(
    env: &Environment,
    grid_resolution: usize,
    tol: f64,
) -> Result<OptimalValues> {
    if !(tol > 0.0) {
        return Err(LabError::Argument("tol must be positive".into()));
    }
    match env.spec().kind {
        EnvKind::GridWorld => grid_oracle(env, tol),
        EnvKind::LineWorld => {
            if grid_resolution < 2 {
                return Err(LabError::Argument("grid_resolution must be at least 2".into()));
            }
            line_oracle(env, grid_resolution, tol)
        }
    }
}

/// One outcome of a discretized (state, action) pair.
struct Branch {
    weight: f64,
    reward: f64,
    terminal: bool,
    lo: usize,
    frac: f64,
}

fn grid_oracle(env: &Environment, tol: f64) -> Result<OptimalValues> {
    let spec = env.spec();
    let n = spec.grid_size;
    let n_states = n * n;
    let n_actions = spec.n_actions;
    let mut branches: Vec<Vec<Branch>> = Vec::with_capacity(n_states * n_actions);
    let mut terminal_state = vec![false; n_states];
    let mut states = Vec::with_capacity(n_states);
    for y in 0..n {
        for x in 0..n {
            let cell = [x, y];
            terminal_state[y * n + x] = env.is_terminal_cell(cell);
            states.push(vec![x as f64, y as f64]);
            for a in 0..n_actions {
                let out = env.step_with_noise(&[x as f64, y as f64], a, 0.0);
                let next = env.cell_of(&out.s_next);
                branches.push(vec![Branch {
                    weight: 1.0,
                    reward: out.r,
                    terminal: out.terminal,
                    lo: next[1] * n + next[0],
                    frac: 0.0,
                }]);
            }
        }
    }
    solve(states, branches, &terminal_state, n_actions, spec.gamma, tol, n, EnvKind::GridWorld)
}

fn line_oracle(env: &Environment, resolution: usize, tol: f64) -> Result<OptimalValues> {
    let spec = env.spec();
    let (nodes, weights) = if spec.noise_std > 0.0 {
        gauss_hermite(QUADRATURE_NODES)
    } else {
        (vec![0.0], vec![1.0])
    };
    let states: Vec<Vec<f64>> = (0..resolution)
        .map(|j| vec![j as f64 / (resolution - 1) as f64])
        .collect();
    let mut branches = Vec::with_capacity(resolution * spec.n_actions);
    for s in &states {
        for a in 0..spec.n_actions {
            let outcomes = nodes
                .iter()
                .zip(&weights)
                .map(|(z, w)| {
                    let out = env.step_with_noise(s, a, spec.noise_std * z);
                    let (lo, frac) = locate(out.s_next[0], resolution);
                    Branch {
                        weight: *w,
                        reward: out.r,
                        terminal: out.terminal,
                        lo,
                        frac,
                    }
                })
                .collect();
            branches.push(outcomes);
        }
    }
    let terminal_state = vec![false; resolution];
    solve(states, branches, &terminal_state, spec.n_actions, spec.gamma, tol, 0, EnvKind::LineWorld)
}

#[allow(clippy::too_many_arguments)]
fn solve(
    states: Vec<Vec<f64>>,
    branches: Vec<Vec<Branch>>,
    terminal_state: &[bool],
    n_actions: usize,
    gamma: f64,
    tol: f64,
    grid_size: usize,
    kind: EnvKind,
) -> Result<OptimalValues> {
    let n_states = states.len();
    let backup = |v: &[f64], s: usize, a: usize| -> f64 {
        branches[s * n_actions + a]
            .iter()
            .map(|b| {
                let boot = if b.terminal {
                    0.0
                } else {
                    let hi = (b.lo + 1).min(n_states - 1);
                    v[b.lo] + b.frac * (v[hi] - v[b.lo])
                };
                b.weight * (b.reward + gamma * boot)
            })
            .sum()
    };
    let mut v = vec![0.0; n_states];
    let mut residuals = Vec::new();
    loop {
        let next: Vec<f64> = (0..n_states)
            .map(|s| {
                if terminal_state[s] {
                    0.0
                } else {
                    (0..n_actions)
                        .map(|a| backup(&v, s, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let residual = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        residuals.push(residual);
        v = next;
        if residual < tol {
            break;
        }
        if residuals.len() >= MAX_SWEEPS {
            return Err(LabError::Numerical(format!(
                "value iteration did not converge in {MAX_SWEEPS} sweeps; residual {residual:e}"
            )));
        }
    }
    let q: Vec<Vec<f64>> = (0..n_states)
        .map(|s| {
            if terminal_state[s] {
                vec![0.0; n_actions]
            } else {
                (0..n_actions).map(|a| backup(&v, s, a)).collect()
            }
        })
        .collect();
    let policy = q.iter().map(|row| argmax_first(row)).collect();
    Ok(OptimalValues {
        kind,
        states,
        v,
        q,
        policy,
        residuals,
        grid_size,
    })
}

/// Nodes and weights integrating against the standard normal density
/// (Golub-Welsch on the probabilists' Hermite recurrence).
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}
