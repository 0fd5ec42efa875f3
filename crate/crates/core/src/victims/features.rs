use serde::{Deserialize, Serialize};

use crate::envlab::{EnvKind, MdpSpec};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum FeatureKind {
    /// One-hot over a grid of cells; `bins[j]` cell centers span coordinate `j`'s range.
    Tabular { bins: Vec<usize> },
    /// Gaussian bumps on a regular grid over the normalized state box.
    RbfGrid { centers_per_dim: usize, bandwidth: f64 },
    /// All monomials of the normalized state with total degree `<= degree`.
    Polynomial { degree: usize },
}

/// `phi(s, a)`: state features replicated into one block per action (one-hot action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    /// Per-coordinate state range used for normalization and binning.
    pub bounds: Vec<(f64, f64)>,
    pub n_actions: usize,
    /// Length of the per-action block.
    pub block_dim: usize,
    /// Total feature length, `block_dim * n_actions`.
    pub dim: usize,
    #[serde(skip)]
    exponents: Vec<Vec<u32>>,
    #[serde(skip)]
    centers: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, bounds: Vec<(f64, f64)>, n_actions: usize) -> Result<Self> {
        if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(hi > lo)) {
            return Err(LabError::config("feature_map.bounds", "every range needs hi > lo"));
        }
        if n_actions == 0 {
            return Err(LabError::config("feature_map.n_actions", "must be positive"));
        }
        let d = bounds.len();
        let mut centers = Vec::new();
        let mut exponents = Vec::new();
        let block_dim = match &kind {
            FeatureKind::Tabular { bins } => {
                if bins.len() != d || bins.contains(&0) {
                    return Err(LabError::config(
                        "feature_map.bins",
                        "need one positive bin count per state coordinate",
                    ));
                }
                bins.iter().product()
            }
            FeatureKind::RbfGrid {
                centers_per_dim,
                bandwidth,
            } => {
                if *centers_per_dim == 0 || !(*bandwidth > 0.0) {
                    return Err(LabError::config(
                        "feature_map.rbf",
                        "need at least one center and a positive bandwidth",
                    ));
                }
                let axis: Vec<f64> = if *centers_per_dim == 1 {
                    vec![0.5]
                } else {
                    (0..*centers_per_dim)
                        .map(|i| i as f64 / (*centers_per_dim - 1) as f64)
                        .collect()
                };
                centers = grid_product(&axis, d);
                centers.len()
            }
            FeatureKind::Polynomial { degree } => {
                exponents = monomials(d, *degree as u32);
                exponents.len()
            }
        };
        Ok(Self {
            kind,
            bounds,
            n_actions,
            block_dim,
            dim: block_dim * n_actions,
            exponents,
            centers,
        })
    }

    /// Default map for an environment: exact cells for GridWorld, 25 RBFs
    /// (bandwidth 0.08) for LineWorld.
    pub fn default_for(spec: &MdpSpec) -> Result<Self> {
        match spec.kind {
            EnvKind::GridWorld => Self::new(
                FeatureKind::Tabular {
                    bins: vec![spec.grid_size; 2],
                },
                spec.state_bounds(),
                spec.n_actions,
            ),
            EnvKind::LineWorld => Self::new(
                FeatureKind::RbfGrid {
                    centers_per_dim: 25,
                    bandwidth: 0.08,
                },
                spec.state_bounds(),
                spec.n_actions,
            ),
        }
    }

    /// Rebuilds derived tables after deserialization.
    pub fn rebuilt(self) -> Result<Self> {
        Self::new(self.kind, self.bounds, self.n_actions)
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self.kind, FeatureKind::Tabular { .. })
    }

    pub fn state_dim(&self) -> usize {
        self.bounds.len()
    }

    fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.bounds)
            .map(|(x, (lo, hi))| (x - lo) / (hi - lo))
            .collect()
    }

    /// Tabular cell of a state, or `None` when it lies outside the bounds.
    pub fn cell(&self, s: &[f64]) -> Option<usize> {
        let FeatureKind::Tabular { bins } = &self.kind else {
            return None;
        };
        let mut index = 0;
        let mut stride = 1;
        for ((x, (lo, hi)), b) in s.iter().zip(&self.bounds).zip(bins) {
            if !(*x >= lo - 1e-9 && *x <= hi + 1e-9) {
                return None;
            }
            let u = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            let k = ((u * (*b - 1) as f64).round() as usize).min(b - 1);
            index += k * stride;
            stride *= b;
        }
        Some(index)
    }

    /// Action-independent state features (one block). Tabular states outside the
    /// bounds are clamped to the nearest cell.
    pub fn state_features(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.block_dim];
        match &self.kind {
            FeatureKind::Tabular { .. } => {
                let clamped: Vec<f64> = s
                    .iter()
                    .zip(&self.bounds)
                    .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
                    .collect();
                let c = self.cell(&clamped).expect("clamped state lies inside");
                out[c] = 1.0;
            }
            FeatureKind::RbfGrid { bandwidth, .. } => {
                let u = self.normalize(s);
                let inv = 1.0 / (2.0 * bandwidth * bandwidth);
                for (o, c) in out.iter_mut().zip(&self.centers) {
                    let d2: f64 = u.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    *o = (-d2 * inv).exp();
                }
            }
            FeatureKind::Polynomial { .. } => {
                let u = self.normalize(s);
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    *o = u.iter().zip(e).map(|(x, p)| x.powi(*p as i32)).product();
                }
            }
        }
        out
    }

    /// `d(state_features)/ds`: one row per state coordinate, each of length `block_dim`.
    pub fn state_jacobian(&self, s: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.state_dim();
        let mut jac = vec![vec![0.0; self.block_dim]; d];
        match &self.kind {
            FeatureKind::Tabular { .. } => {
                return Err(LabError::UnsupportedSurface {
                    surface: "state".into(),
                    reason: "tabular features (no state derivative)".into(),
                })
            }
            FeatureKind::RbfGrid { bandwidth, .. } => {
                let u = self.normalize(s);
                let b2 = bandwidth * bandwidth;
                let inv = 1.0 / (2.0 * b2);
                for (k, c) in self.centers.iter().enumerate() {
                    let d2: f64 = u.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    let phi = (-d2 * inv).exp();
                    for j in 0..d {
                        let (lo, hi) = self.bounds[j];
                        jac[j][k] = -phi * (u[j] - c[j]) / b2 / (hi - lo);
                    }
                }
            }
            FeatureKind::Polynomial { .. } => {
                let u = self.normalize(s);
                for (k, e) in self.exponents.iter().enumerate() {
                    for j in 0..d {
                        if e[j] == 0 {
                            continue;
                        }
                        let (lo, hi) = self.bounds[j];
                        let mut term = f64::from(e[j]) * u[j].powi(e[j] as i32 - 1) / (hi - lo);
                        for (m, (x, p)) in u.iter().zip(e).enumerate() {
                            if m != j {
                                term *= x.powi(*p as i32);
                            }
                        }
                        jac[j][k] = term;
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Full `phi(s, a)` of length `dim`.
    pub fn phi(&self, s: &[f64], a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let base = self.state_features(s);
        out[a * self.block_dim..(a + 1) * self.block_dim].copy_from_slice(&base);
        out
    }
}

fn grid_product(axis: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |x| {
                    let mut q = p.clone();
                    q.push(*x);
                    q
                })
            })
            .collect();
    }
    out
}

fn monomials(d: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(d: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == d {
            out.push(prefix.clone());
            return;
        }
        for p in 0..=left {
            prefix.push(p);
            rec(d, left - p, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), e.clone()));
    out
}
