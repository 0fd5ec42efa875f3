//! Offline RL victims: tabular Q-learning sweeps, linear fitted Q-iteration, and a
//! conservative-penalty FQI variant.

mod checkpoint;
mod features;

pub use features::{FeatureKind, FeatureMap};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::envlab::{argmax_first, Policy, TransitionDataset};
use crate::error::{LabError, Result};
use crate::par;

/// `|theta|_inf` above which FQI is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlgoTag {
    TabQ,
    LinFQI,
    ConsLinFQI,
}

impl std::str::FromStr for AlgoTag {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TabQ" | "tabq" => Ok(Self::TabQ),
            "LinFQI" | "linfqi" => Ok(Self::LinFQI),
            "ConsLinFQI" | "conslinfqi" => Ok(Self::ConsLinFQI),
            other => Err(LabError::config("algo", format!("unknown victim `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_iterations: usize,
    pub ridge_lambda: f64,
    pub conservative_beta: f64,
    /// Step size of tabular sweeps.
    pub learning_rate: f64,
    /// Early-stop threshold: `|theta_{k+1} - theta_k|_inf` for FQI, largest single
    /// update for tabular sweeps. Zero disables early stopping.
    pub tol: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn tabular_default() -> Self {
        Self {
            n_iterations: 200,
            ridge_lambda: 0.0,
            conservative_beta: 0.0,
            learning_rate: 0.05,
            tol: 0.0,
            seed: 0,
        }
    }

    pub fn fqi_default() -> Self {
        Self {
            n_iterations: 50,
            ridge_lambda: 1e-3,
            conservative_beta: 0.0,
            learning_rate: 1.0,
            tol: 1e-8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(LabError::config("n_iterations", "must be at least 1"));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.ridge_lambda) {
            return Err(LabError::config("ridge_lambda", "must be finite and >= 0"));
        }
        if !finite_nonneg(self.conservative_beta) {
            return Err(LabError::config("conservative_beta", "must be finite and >= 0"));
        }
        if !finite_nonneg(self.tol) {
            return Err(LabError::config("tol", "must be finite and >= 0"));
        }
        if !self.learning_rate.is_finite() {
            return Err(LabError::config("learning_rate", "must be finite"));
        }
        Ok(())
    }
}

/// `Q(s, a) = theta . phi(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel {
    pub feature_map: FeatureMap,
    pub theta: Vec<f64>,
    pub gamma: f64,
    pub algo_tag: AlgoTag,
    /// Mean |TD error| per sweep (TabQ) or `|delta theta|_inf` per iteration (FQI).
    pub train_log: Vec<f64>,
}

impl VictimModel {
    pub fn q(&self, s: &[f64], a: usize) -> f64 {
        let base = self.feature_map.state_features(s);
        block_dot(&self.theta, &base, a)
    }

    pub fn q_all(&self, s: &[f64]) -> Vec<f64> {
        let base = self.feature_map.state_features(s);
        q_from_base(&self.theta, &base, self.feature_map.n_actions)
    }

    pub fn max_q(&self, s: &[f64]) -> f64 {
        self.q_all(s).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy_action(&self, s: &[f64]) -> usize {
        argmax_first(&self.q_all(s))
    }

    /// `dQ(s, a)/ds = theta_a . d(state_features)/ds`.
    pub fn q_state_gradient(&self, s: &[f64], a: usize) -> Result<Vec<f64>> {
        let jac = self.feature_map.state_jacobian(s)?;
        Ok(jac.iter().map(|row| block_dot(&self.theta, row, a)).collect())
    }
}

impl Policy for VictimModel {
    fn act(&self, state: &[f64]) -> usize {
        self.greedy_action(state)
    }
}

/// The greedy policy of a trained model (ties go to the lowest action index).
pub fn greedy_policy(model: &VictimModel) -> &dyn Policy {
    model
}

fn block_dot(theta: &[f64], base: &[f64], a: usize) -> f64 {
    let k = base.len();
    theta[a * k..(a + 1) * k]
        .iter()
        .zip(base)
        .map(|(t, b)| t * b)
        .sum()
}

fn q_from_base(theta: &[f64], base: &[f64], n_actions: usize) -> Vec<f64> {
    (0..n_actions).map(|a| block_dot(theta, base, a)).collect()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(LabError::config("gamma", format!("must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// Full TD sweeps in idx order: `Q(s,a) += alpha * delta`, bootstrap masked on terminals.
pub fn train_tabular_q(
    data: &TransitionDataset,
    feature_map: FeatureMap,
    cfg: &TrainConfig,
) -> Result<VictimModel> {
    cfg.validate()?;
    let gamma = data.spec.gamma;
    check_gamma(gamma)?;
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate <= 1.0) {
        return Err(LabError::config("learning_rate", "must lie in [0, 1]"));
    }
    let FeatureKind::Tabular { .. } = feature_map.kind else {
        return Err(LabError::config("feature_map", "tabular Q-learning needs tabular features"));
    };
    let n_actions = feature_map.n_actions;
    let cells: Vec<(usize, usize)> = data
        .transitions
        .iter()
        .map(|t| {
            let oob = |what: &str| LabError::Data {
                idx: t.idx,
                reason: format!("{what} outside the tabular bin range"),
            };
            let c = feature_map.cell(&t.s).ok_or_else(|| oob("state"))?;
            let c2 = feature_map.cell(&t.s_next).ok_or_else(|| oob("next state"))?;
            if t.a >= n_actions {
                return Err(LabError::Data { idx: t.idx, reason: "action out of range".into() });
            }
            Ok((c, c2))
        })
        .collect::<Result<_>>()?;
    let block = feature_map.block_dim;
    let mut theta = vec![0.0; feature_map.dim];
    let alpha = cfg.learning_rate;
    let mut log = Vec::with_capacity(cfg.n_iterations);
    for _ in 0..cfg.n_iterations {
        let mut abs_sum = 0.0;
        let mut largest = 0.0f64;
        for (t, (c, c2)) in data.transitions.iter().zip(&cells) {
            let boot = if t.terminal {
                0.0
            } else {
                (0..n_actions)
                    .map(|a| theta[a * block + c2])
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let slot = t.a * block + c;
            let delta = t.r + gamma * boot - theta[slot];
            theta[slot] += alpha * delta;
            abs_sum += delta.abs();
            largest = largest.max((alpha * delta).abs());
        }
        log.push(abs_sum / data.len() as f64);
        if cfg.tol > 0.0 && largest < cfg.tol {
            break;
        }
    }
    Ok(VictimModel {
        feature_map,
        theta,
        gamma,
        algo_tag: AlgoTag::TabQ,
        train_log: log,
    })
}

/// Exact-solve fitted Q-iteration. With `conservative_beta > 0` the targets are
/// lowered by `beta * (mean_a Q(s, a) - Q(s, a_data))`.
pub fn train_linear_fqi(
    data: &TransitionDataset,
    feature_map: FeatureMap,
    cfg: &TrainConfig,
) -> Result<VictimModel> {
    cfg.validate()?;
    let gamma = data.spec.gamma;
    check_gamma(gamma)?;
    let n_actions = feature_map.n_actions;
    let block = feature_map.block_dim;
    for t in &data.transitions {
        if t.a >= n_actions || t.s.len() != feature_map.state_dim() {
            return Err(LabError::Data {
                idx: t.idx,
                reason: "transition inconsistent with the feature map".into(),
            });
        }
    }

    let base: Vec<Vec<f64>> = par::map(&data.transitions, |t| feature_map.state_features(&t.s));
    let base_next: Vec<Vec<f64>> =
        par::map(&data.transitions, |t| feature_map.state_features(&t.s_next));
    let rows: Vec<usize> = (0..data.len()).collect();

    // The normal matrix is block diagonal over actions; factor each block once.
    let grams: Vec<DMatrix<f64>> = par::chunked_reduce(
        &rows,
        || vec![DMatrix::<f64>::zeros(block, block); n_actions],
        |mut acc, &i| {
            let b = DVector::from_column_slice(&base[i]);
            acc[data.transitions[i].a].ger(1.0, &b, &b, 1.0);
            acc
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        },
    );
    let factors: Vec<Cholesky<f64, Dyn>> = grams
        .into_iter()
        .enumerate()
        .map(|(a, mut g)| {
            for k in 0..block {
                g[(k, k)] += cfg.ridge_lambda;
            }
            Cholesky::new(g).ok_or_else(|| {
                LabError::Numerical(format!(
                    "normal matrix for action {a} is singular; use ridge_lambda > 0"
                ))
            })
        })
        .collect::<Result<_>>()?;

    let algo_tag = if cfg.conservative_beta > 0.0 {
        AlgoTag::ConsLinFQI
    } else {
        AlgoTag::LinFQI
    };
    let mut theta = vec![0.0; feature_map.dim];
    let mut log = Vec::with_capacity(cfg.n_iterations);
    for _ in 0..cfg.n_iterations {
        let targets: Vec<f64> = par::map_range(data.len(), |i| {
            let t = &data.transitions[i];
            let mut y = t.r;
            if !t.terminal {
                let next = q_from_base(&theta, &base_next[i], n_actions);
                y += gamma * next.into_iter().fold(f64::NEG_INFINITY, f64::max);
            }
            if cfg.conservative_beta > 0.0 {
                let here = q_from_base(&theta, &base[i], n_actions);
                let mean = here.iter().sum::<f64>() / n_actions as f64;
                y -= cfg.conservative_beta * (mean - here[t.a]);
            }
            y
        });
        let rhs: Vec<Vec<f64>> = par::chunked_reduce(
            &rows,
            || vec![vec![0.0; block]; n_actions],
            |mut acc, &i| {
                let dst = &mut acc[data.transitions[i].a];
                for (d, b) in dst.iter_mut().zip(&base[i]) {
                    *d += b * targets[i];
                }
                acc
            },
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    for (p, q) in x.iter_mut().zip(y) {
                        *p += q;
                    }
                }
                a
            },
        );
        let mut next = vec![0.0; feature_map.dim];
        for (a, (chol, r)) in factors.iter().zip(rhs).enumerate() {
            let sol = chol.solve(&DVector::from_vec(r));
            next[a * block..(a + 1) * block].copy_from_slice(sol.as_slice());
        }
        let norm = next.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(LabError::Divergence {
                norm,
                limit: DIVERGENCE_LIMIT,
            });
        }
        let change = next
            .iter()
            .zip(&theta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        theta = next;
        log.push(change);
        if change < cfg.tol {
            break;
        }
    }
    Ok(VictimModel {
        feature_map,
        theta,
        gamma,
        algo_tag,
        train_log: log,
    })
}

/// Trains the victim named by `algo`.
pub fn train(
    algo: AlgoTag,
    data: &TransitionDataset,
    feature_map: FeatureMap,
    cfg: &TrainConfig,
) -> Result<VictimModel> {
    match algo {
        AlgoTag::TabQ => train_tabular_q(data, feature_map, cfg),
        AlgoTag::LinFQI => {
            let mut c = cfg.clone();
            c.conservative_beta = 0.0;
            train_linear_fqi(data, feature_map, &c)
        }
        AlgoTag::ConsLinFQI => {
            if !(cfg.conservative_beta > 0.0) {
                return Err(LabError::config(
                    "conservative_beta",
                    "ConsLinFQI needs a positive conservative_beta",
                ));
            }
            train_linear_fqi(data, feature_map, cfg)
        }
    }
}

#[cfg(test)]
mod tests;
