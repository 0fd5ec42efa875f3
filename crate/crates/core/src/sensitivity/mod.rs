//! Per-transition TD errors, attack gradients and influence scores.
//!
//! For a linear model `Q = theta . phi(s, a)` the half-squared Bellman residual
//! `L = delta^2 / 2` has `dL/dtheta = -delta * phi(s, a)` with the bootstrap
//! target held fixed, so `|delta| * |phi(s, a)|` is a first-order stand-in for the
//! exact influence `|H^-1 dL/dtheta|`. [`exact_influence_oracle`] computes the
//! latter on small models so the two can be compared.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::envlab::{Transition, TransitionDataset};
use crate::error::{LabError, Result};
use crate::numfmt::fmt_f64;
use crate::par;
use crate::victims::VictimModel;

pub const MAX_ORACLE_DIM: usize = 200;
pub const MAX_ORACLE_ROWS: usize = 20_000;
pub const MAX_CONDITION: f64 = 1e12;

/// Which transition fields an attacker may perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    Reward,
    State,
    Both,
}

impl Surface {
    pub fn includes_reward(self) -> bool {
        matches!(self, Surface::Reward | Surface::Both)
    }

    pub fn includes_state(self) -> bool {
        matches!(self, Surface::State | Surface::Both)
    }
}

impl std::str::FromStr for Surface {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(Self::Reward),
            "state" => Ok(Self::State),
            "both" => Ok(Self::Both),
            other => Err(LabError::config("surface", format!("unknown surface `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub surface: Surface,
    /// Also differentiate through the bootstrap target and expose a gradient for
    /// `s_next`. Off by default: only the current state is perturbable.
    pub perturb_next_state: bool,
}

impl ScoreOptions {
    pub fn new(surface: Surface) -> Self {
        Self {
            surface,
            perturb_next_state: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub idx: usize,
    pub delta: f64,
    pub abs_delta: f64,
    /// `d|delta|/dr = sign(delta)`, with `sign(0) = 0`. Zero when the reward is not
    /// on the surface.
    pub grad_reward: f64,
    /// `d|delta|/ds`; empty when the state is not on the surface.
    pub grad_state: Vec<f64>,
    /// `d|delta|/ds'`; empty unless next-state perturbation is enabled.
    pub grad_next_state: Vec<f64>,
    pub grad_norm: f64,
    pub influence_proxy: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `delta = r + gamma * max_a' Q(s', a') - Q(s, a)`, bootstrap zeroed on terminals.
pub fn td_error(model: &VictimModel, t: &Transition) -> Result<f64> {
    let q_sa = model.q(&t.s, t.a);
    let boot = if t.terminal { 0.0 } else { model.max_q(&t.s_next) };
    let delta = t.r + model.gamma * boot - q_sa;
    if !delta.is_finite() {
        return Err(LabError::Numerical(format!(
            "non-finite TD error at transition {}",
            t.idx
        )));
    }
    Ok(delta)
}

pub fn score_transition(
    model: &VictimModel,
    t: &Transition,
    opts: &ScoreOptions,
) -> Result<SensitivityRecord> {
    let delta = td_error(model, t)?;
    let sg = sign(delta);
    let grad_reward = if opts.surface.includes_reward() { sg } else { 0.0 };
    let grad_state = if opts.surface.includes_state() {
        // Targets are frozen: only Q(s, a) depends on s.
        model
            .q_state_gradient(&t.s, t.a)?
            .into_iter()
            .map(|g| -sg * g)
            .collect()
    } else {
        Vec::new()
    };
    let grad_next_state = if opts.surface.includes_state() && opts.perturb_next_state {
        if t.terminal {
            vec![0.0; t.s_next.len()]
        } else {
            let best = model.greedy_action(&t.s_next);
            model
                .q_state_gradient(&t.s_next, best)?
                .into_iter()
                .map(|g| sg * model.gamma * g)
                .collect()
        }
    } else {
        Vec::new()
    };
    let grad_norm = (grad_reward * grad_reward
        + grad_state.iter().chain(&grad_next_state).map(|g| g * g).sum::<f64>())
    .sqrt();
    let phi_norm = model
        .feature_map
        .state_features(&t.s)
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    Ok(SensitivityRecord {
        idx: t.idx,
        delta,
        abs_delta: delta.abs(),
        grad_reward,
        grad_state,
        grad_next_state,
        grad_norm,
        influence_proxy: delta.abs() * phi_norm,
    })
}

pub fn score_dataset(
    model: &VictimModel,
    data: &TransitionDataset,
    surface: Surface,
) -> Result<Vec<SensitivityRecord>> {
    score_dataset_with(model, data, &ScoreOptions::new(surface))
}

pub fn score_dataset_with(
    model: &VictimModel,
    data: &TransitionDataset,
    opts: &ScoreOptions,
) -> Result<Vec<SensitivityRecord>> {
    if opts.surface.includes_state() && !model.feature_map.is_differentiable() {
        return Err(LabError::UnsupportedSurface {
            surface: format!("{:?}", opts.surface).to_lowercase(),
            reason: "tabular features (no state derivative)".into(),
        });
    }
    par::map(&data.transitions, |t| score_transition(model, t, opts))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    AbsDelta,
    InfluenceProxy,
}

impl RankKey {
    fn of(self, r: &SensitivityRecord) -> f64 {
        match self {
            RankKey::AbsDelta => r.abs_delta,
            RankKey::InfluenceProxy => r.influence_proxy,
        }
    }
}

/// Transition idx values of the `k` largest records by `key`, largest first;
/// ties go to the lower idx.
pub fn top_k_by_sensitivity(
    records: &[SensitivityRecord],
    k: usize,
    key: RankKey,
) -> Result<Vec<usize>> {
    if k == 0 || k > records.len() {
        return Err(LabError::Argument(format!(
            "k must lie in [1, {}], got {k}",
            records.len()
        )));
    }
    let mut order: Vec<&SensitivityRecord> = records.iter().collect();
    order.sort_by(|a, b| key.of(b).total_cmp(&key.of(a)).then(a.idx.cmp(&b.idx)));
    Ok(order[..k].iter().map(|r| r.idx).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceOracleResult {
    /// `|H^-1 (-delta_i phi_i)|` per transition.
    pub influence_norms: Vec<f64>,
    /// `|delta_i| * |phi_i|` per transition, for reference.
    pub proxy: Vec<f64>,
    pub hessian_condition_number: f64,
    /// Spearman correlation of the two; `None` when either side is constant.
    pub rank_correlation_vs_proxy: Option<f64>,
}

/// Exact influence norms under the Gauss-Newton Hessian `sum phi phi^T + damping I`
/// of the frozen-target squared residual loss.
pub fn exact_influence_oracle(
    model: &VictimModel,
    data: &TransitionDataset,
    damping: f64,
) -> Result<InfluenceOracleResult> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(LabError::Argument("damping must be finite and >= 0".into()));
    }
    let dim = model.feature_map.dim;
    if dim > MAX_ORACLE_DIM {
        return Err(LabError::Argument(format!(
            "feature dimension {dim} exceeds the oracle limit {MAX_ORACLE_DIM}"
        )));
    }
    if data.len() > MAX_ORACLE_ROWS {
        return Err(LabError::Argument(format!(
            "dataset of {} transitions exceeds the oracle limit {MAX_ORACLE_ROWS}",
            data.len()
        )));
    }
    let phis: Vec<Vec<f64>> = par::map(&data.transitions, |t| model.feature_map.phi(&t.s, t.a));
    let mut h: DMatrix<f64> = par::chunked_reduce(
        &phis,
        || DMatrix::<f64>::zeros(dim, dim),
        |mut acc, phi| {
            let v = DVector::from_column_slice(phi);
            acc.ger(1.0, &v, &v, 1.0);
            acc
        },
        |a, b| a + b,
    );
    for k in 0..dim {
        h[(k, k)] += damping;
    }
    let eig = SymmetricEigen::new(h.clone());
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    let condition = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(LabError::IllConditioned { condition });
    }
    let chol = h
        .cholesky()
        .ok_or(LabError::IllConditioned { condition })?;
    let deltas: Vec<f64> = data
        .transitions
        .iter()
        .map(|t| td_error(model, t))
        .collect::<Result<_>>()?;
    let influence_norms = par::map_range(data.len(), |i| {
        let grad = DVector::from_column_slice(&phis[i]) * (-deltas[i]);
        chol.solve(&grad).norm()
    });
    let proxy: Vec<f64> = phis
        .iter()
        .zip(&deltas)
        .map(|(phi, d)| d.abs() * phi.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Ok(InfluenceOracleResult {
        rank_correlation_vs_proxy: spearman(&influence_norms, &proxy),
        influence_norms,
        proxy,
        hessian_condition_number: condition,
    })
}

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// CSV with columns `idx,delta,abs_delta,grad_norm,influence_proxy`, plus
/// `epsilon` when an allocation is supplied (indexed by record position).
pub fn records_to_csv(records: &[SensitivityRecord], epsilons: Option<&[f64]>) -> String {
    let mut out = String::from("idx,delta,abs_delta,grad_norm,influence_proxy");
    if epsilons.is_some() {
        out.push_str(",epsilon");
    }
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.idx,
            fmt_f64(r.delta),
            fmt_f64(r.abs_delta),
            fmt_f64(r.grad_norm),
            fmt_f64(r.influence_proxy)
        );
        if let Some(eps) = epsilons {
            let _ = write!(out, ",{}", fmt_f64(eps[i]));
        }
        out.push('\n');
    }
    out
}
