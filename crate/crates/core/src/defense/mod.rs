//! Data-only poison detectors: robust z-scores, Mahalanobis distance and
//! spectral signatures.
//!
//! Each detector is fitted on a dataset and can then score any row, which lets a
//! detector fitted on poisoned data also score the untouched base rows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attacks::{apply, PoisonedDataset};
use crate::envlab::{Transition, TransitionDataset};
use crate::error::{LabError, Result};
use crate::sensitivity::average_ranks;

pub const MIN_ROWS: usize = 10;
pub const DEFAULT_Z_THRESHOLD: f64 = 3.5;
pub const DEFAULT_QUANTILE: f64 = 0.999;
pub const DIAGONAL_LOADING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorKind {
    RobustZ,
    Mahalanobis,
    Spectral,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [Self::RobustZ, Self::Mahalanobis, Self::Spectral];

    pub fn label(self) -> &'static str {
        match self {
            Self::RobustZ => "RobustZ",
            Self::Mahalanobis => "Mahalanobis",
            Self::Spectral => "Spectral",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "robustz" => Ok(Self::RobustZ),
            "mahalanobis" => Ok(Self::Mahalanobis),
            "spectral" => Ok(Self::Spectral),
            _ => Err(LabError::config("detector", format!("unknown detector `{s}`"))),
        }
    }
}

/// Detector parameters. `k_remove = None` means "the number of poisoned rows".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    #[serde(default = "default_z")]
    pub z_threshold: f64,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_remove: Option<usize>,
}

fn default_z() -> f64 {
    DEFAULT_Z_THRESHOLD
}

fn default_quantile() -> f64 {
    DEFAULT_QUANTILE
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            z_threshold: DEFAULT_Z_THRESHOLD,
            quantile: DEFAULT_QUANTILE,
            k_remove: None,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_threshold > 0.0) {
            return Err(LabError::config("z_threshold", "must be positive"));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(LabError::config("quantile", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detector: DetectorKind,
    pub scores: Vec<f64>,
    pub flagged: Vec<usize>,
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    pub max_score: f64,
    /// Ranking quality of `scores` against the poisoned flags; absent when every
    /// row or no row is poisoned.
    pub auc: Option<f64>,
    /// Columns skipped for having zero spread.
    pub skipped_columns: Vec<usize>,
}

/// `(s, r, s_next)` for one transition.
pub fn transition_row(t: &Transition) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * t.s.len() + 1);
    row.extend_from_slice(&t.s);
    row.push(t.r);
    row.extend_from_slice(&t.s_next);
    row
}

/// Robust-z columns: every state coordinate and the reward.
fn z_row(t: &Transition) -> Vec<f64> {
    let mut row = t.s.clone();
    row.push(t.r);
    row
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    if rows.len() < MIN_ROWS {
        return Err(LabError::InsufficientData { needed: MIN_ROWS, got: rows.len() });
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(LabError::Argument("feature rows must share a positive width".into()));
    }
    Ok(d)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-column medians and MADs; zero-MAD columns are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustZModel {
    pub medians: Vec<f64>,
    pub mads: Vec<f64>,
    pub skipped: Vec<usize>,
}

impl RobustZModel {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = check_rows(rows)?;
        let (mut medians, mut mads, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..d {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let med = median(&mut col);
            let mut dev: Vec<f64> = rows.iter().map(|r| (r[j] - med).abs()).collect();
            let mad = median(&mut dev);
            if mad == 0.0 {
                skipped.push(j);
            }
            medians.push(med);
            mads.push(mad);
        }
        Ok(Self { medians, mads, skipped })
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        row.iter()
            .zip(self.medians.iter().zip(&self.mads))
            .filter(|(_, (_, mad))| **mad > 0.0)
            .map(|(x, (med, mad))| (0.6745 * (x - med) / mad).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisModel {
    pub mean: DVector<f64>,
    /// Lower Cholesky factor of the loaded covariance.
    pub chol_l: DMatrix<f64>,
}

impl MahalanobisModel {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = check_rows(rows)?;
        let (mean, cov) = mean_cov(rows, d);
        let loaded = cov + DMatrix::identity(d, d) * DIAGONAL_LOADING;
        let chol = loaded.cholesky().ok_or_else(|| {
            LabError::Numerical("feature covariance is singular even after diagonal loading".into())
        })?;
        Ok(Self { mean, chol_l: chol.l() })
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        let x = DVector::from_column_slice(row) - &self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&x)
            .expect("Cholesky factor has a positive diagonal");
        z.norm()
    }
}

fn mean_cov(rows: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let x = DVector::from_column_slice(r) - &mean;
        cov.ger(1.0, &x, &x, 1.0);
    }
    (mean, cov / n)
}

/// Top right singular vector of the centered feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    pub mean: DVector<f64>,
    pub direction: DVector<f64>,
}

impl SpectralModel {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = check_rows(rows)?;
        if rows.len() <= d {
            return Err(LabError::InsufficientData { needed: d + 1, got: rows.len() });
        }
        let (mean, cov) = mean_cov(rows, d);
        let eig = SymmetricEigen::new(cov);
        let (top, value) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        // Rounding in the mean leaves variance of order eps^2 * |x|^2 on constant data.
        let scale = rows.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        if !(value > 64.0 * f64::EPSILON * f64::EPSILON * scale * scale) {
            return Err(LabError::Numerical("centered feature matrix has rank 0".into()));
        }
        Ok(Self { mean, direction: eig.eigenvectors.column(top).into_owned() })
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        let x = DVector::from_column_slice(row) - &self.mean;
        x.dot(&self.direction).powi(2)
    }
}

/// Any fitted detector, scoring rows of its own feature layout.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedDetector {
    RobustZ(RobustZModel),
    Mahalanobis(MahalanobisModel),
    Spectral(SpectralModel),
}

impl FittedDetector {
    pub fn fit(kind: DetectorKind, data: &TransitionDataset) -> Result<Self> {
        let rows = feature_rows(kind, data);
        Ok(match kind {
            DetectorKind::RobustZ => Self::RobustZ(RobustZModel::fit(&rows)?),
            DetectorKind::Mahalanobis => Self::Mahalanobis(MahalanobisModel::fit(&rows)?),
            DetectorKind::Spectral => Self::Spectral(SpectralModel::fit(&rows)?),
        })
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            Self::RobustZ(_) => DetectorKind::RobustZ,
            Self::Mahalanobis(_) => DetectorKind::Mahalanobis,
            Self::Spectral(_) => DetectorKind::Spectral,
        }
    }

    pub fn score_transition(&self, t: &Transition) -> f64 {
        match self {
            Self::RobustZ(m) => m.score(&z_row(t)),
            Self::Mahalanobis(m) => m.score(&transition_row(t)),
            Self::Spectral(m) => m.score(&transition_row(t)),
        }
    }
}

pub fn feature_rows(kind: DetectorKind, data: &TransitionDataset) -> Vec<Vec<f64>> {
    match kind {
        DetectorKind::RobustZ => data.transitions.iter().map(z_row).collect(),
        _ => data.transitions.iter().map(transition_row).collect(),
    }
}

/// Probability that a random positive outscores a random negative, ties counting
/// one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != positive.len() {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Linear-interpolation empirical quantile.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn finish(
    detector: DetectorKind,
    scores: Vec<f64>,
    flagged: Vec<usize>,
    threshold: f64,
    truth: &[bool],
    skipped_columns: Vec<usize>,
) -> DetectionReport {
    let n_true = truth.iter().filter(|t| **t).count();
    let hits = flagged.iter().filter(|i| truth[**i]).count();
    DetectionReport {
        detector,
        max_score: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        auc: auc(&scores, truth),
        recall: if n_true == 0 { 0.0 } else { hits as f64 / n_true as f64 },
        precision: if flagged.is_empty() { 0.0 } else { hits as f64 / flagged.len() as f64 },
        scores,
        flagged,
        threshold,
        skipped_columns,
    }
}

fn truth(data: &TransitionDataset) -> Vec<bool> {
    data.transitions.iter().map(|t| t.poisoned).collect()
}

/// Robust z-score over state coordinates and reward; flags `score > threshold`.
pub fn detect_robust_z(data: &TransitionDataset, threshold: f64) -> Result<DetectionReport> {
    if !(threshold > 0.0) {
        return Err(LabError::config("z_threshold", "must be positive"));
    }
    let rows = feature_rows(DetectorKind::RobustZ, data);
    let model = RobustZModel::fit(&rows)?;
    let scores: Vec<f64> = rows.iter().map(|r| model.score(r)).collect();
    let flagged = (0..scores.len()).filter(|i| scores[*i] > threshold).collect();
    Ok(finish(DetectorKind::RobustZ, scores, flagged, threshold, &truth(data), model.skipped))
}

/// Mahalanobis distance of `(s, r, s_next)`; flags scores above the empirical
/// `quantile`.
pub fn detect_mahalanobis(data: &TransitionDataset, quantile: f64) -> Result<DetectionReport> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(LabError::config("quantile", "must lie in (0, 1)"));
    }
    let rows = feature_rows(DetectorKind::Mahalanobis, data);
    let model = MahalanobisModel::fit(&rows)?;
    let scores: Vec<f64> = rows.iter().map(|r| model.score(r)).collect();
    let threshold = empirical_quantile(&scores, quantile);
    let flagged = (0..scores.len()).filter(|i| scores[*i] > threshold).collect();
    Ok(finish(DetectorKind::Mahalanobis, scores, flagged, threshold, &truth(data), vec![]))
}

/// Squared projection on the top singular direction; flags the `k_remove` largest
/// scores (lower index first among ties).
pub fn detect_spectral(data: &TransitionDataset, k_remove: usize) -> Result<DetectionReport> {
    let rows = feature_rows(DetectorKind::Spectral, data);
    let model = SpectralModel::fit(&rows)?;
    let scores: Vec<f64> = rows.iter().map(|r| model.score(r)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    let k = k_remove.min(scores.len());
    let mut flagged: Vec<usize> = order[..k].to_vec();
    let threshold = if k == 0 { f64::INFINITY } else { scores[flagged[k - 1]] };
    flagged.sort_unstable();
    Ok(finish(DetectorKind::Spectral, scores, flagged, threshold, &truth(data), vec![]))
}

pub fn detect(
    kind: DetectorKind,
    data: &TransitionDataset,
    params: &DetectorParams,
) -> Result<DetectionReport> {
    match kind {
        DetectorKind::RobustZ => detect_robust_z(data, params.z_threshold),
        DetectorKind::Mahalanobis => detect_mahalanobis(data, params.quantile),
        DetectorKind::Spectral => {
            let k = params
                .k_remove
                .unwrap_or_else(|| data.transitions.iter().filter(|t| t.poisoned).count());
            detect_spectral(data, k)
        }
    }
}

/// AUC of a detector fitted on the poisoned data at separating the perturbed
/// rows from every row of the clean base. Defined even when the attack touches
/// every transition.
pub fn auc_against_base(
    kind: DetectorKind,
    base: &TransitionDataset,
    poisoned: &TransitionDataset,
) -> Result<Option<f64>> {
    let fitted = FittedDetector::fit(kind, poisoned)?;
    let mut scores = Vec::with_capacity(base.len() + poisoned.len());
    let mut positive = Vec::with_capacity(scores.capacity());
    for t in poisoned.transitions.iter().filter(|t| t.poisoned) {
        scores.push(fitted.score_transition(t));
        positive.push(true);
    }
    for t in &base.transitions {
        scores.push(fitted.score_transition(t));
        positive.push(false);
    }
    Ok(auc(&scores, &positive))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthRow {
    pub detector: DetectorKind,
    pub attack: String,
    pub recall: f64,
    pub precision: f64,
    pub auc: Option<f64>,
    pub auc_vs_base: Option<f64>,
    pub max_score: f64,
    pub flagged_count: usize,
}

/// Runs every detector on every attacked copy of `clean`.
pub fn stealth_comparison(
    clean: &TransitionDataset,
    attacks: &[(String, PoisonedDataset)],
    params: &DetectorParams,
) -> Result<Vec<StealthRow>> {
    params.validate()?;
    let fp = clean.fingerprint();
    if let Some((name, _)) = attacks
        .iter()
        .find(|(_, p)| p.base_fingerprint != fp || p.base_len != clean.len())
    {
        return Err(LabError::Argument(format!("attack `{name}` was built on a different base dataset")));
    }
    let mut rows = Vec::new();
    for (name, p) in attacks {
        let data = apply(clean, p)?;
        for kind in DetectorKind::ALL {
            rows.push(stealth_row(kind, name, clean, &data, params)?);
        }
    }
    Ok(rows)
}

pub fn stealth_row(
    kind: DetectorKind,
    attack: &str,
    clean: &TransitionDataset,
    poisoned: &TransitionDataset,
    params: &DetectorParams,
) -> Result<StealthRow> {
    let r = detect(kind, poisoned, params)?;
    Ok(StealthRow {
        detector: kind,
        attack: attack.to_string(),
        recall: r.recall,
        precision: r.precision,
        auc: r.auc,
        auc_vs_base: auc_against_base(kind, clean, poisoned)?,
        max_score: r.max_score,
        flagged_count: r.flagged.len(),
    })
}
