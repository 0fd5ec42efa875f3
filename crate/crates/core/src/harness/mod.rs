//! Experiment orchestration: dataset -> clean victim -> attacks -> retrained
//! victims -> detectors, aggregated into a report.

mod config;
mod report;

pub use config::{
    default_train_config, AttackSpec, DatasetConfig, DetectorsConfig, EnvConfig, ExperimentConfig,
    GridConfig, NamedAttack, Units, VictimConfig, NOISE_FULL_LABEL, TABLE_GRID,
};
pub use report::{detection_csv, emit_report, from_json, markdown, rows_csv, to_json, ReportFormat};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{apply, audit_energy, run_attack, AttackConfig, FieldScales, Strategy};
use crate::defense::{stealth_row, DetectorKind};
use crate::envlab::{evaluate_policy, generate_dataset, Environment, TransitionDataset};
use crate::error::{LabError, Result};
use crate::par;
use crate::sensitivity::{exact_influence_oracle, score_dataset, SensitivityRecord, Surface};
use crate::victims::{train, VictimModel};

/// Seed stream used for evaluation rollouts.
const EVAL_STREAM: u64 = 0xE7A1;
/// Damping of the influence diagnostic.
const INFLUENCE_DAMPING: f64 = 1e-3;

/// `100 * (clean - attacked) / clean`.
pub fn reduction_pct(clean: f64, attacked: f64) -> Result<f64> {
    if clean == 0.0 || !clean.is_finite() {
        return Err(LabError::UndefinedMetric(format!(
            "reduction is undefined for clean score {clean}"
        )));
    }
    Ok(100.0 * (clean - attacked) / clean)
}

/// Rollout seed for a pipeline seed; shared by `run` and the `evaluate` command.
pub fn evaluation_seed(seed: u64) -> u64 {
    par::derive_seed(seed, EVAL_STREAM)
}

pub fn field_scales(units: Units, data: &TransitionDataset) -> FieldScales {
    match units {
        Units::RobustStd => FieldScales::robust(data),
        Units::Raw => FieldScales::unit(data.spec.state_dim),
    }
}

/// Per-seed attack seed, so seeds differ across pipeline runs.
pub fn attack_seed(attack: &AttackConfig, seed: u64) -> u64 {
    par::derive_seed(attack.seed, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRow {
    pub detector: DetectorKind,
    pub recall: f64,
    pub precision: f64,
    pub auc: Option<f64>,
    pub auc_vs_base: Option<f64>,
    pub max_score: f64,
    pub flagged_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub victim: String,
    pub config: String,
    pub strategy: String,
    pub seed: u64,
    pub clean_score: f64,
    pub post_attack_score: Option<f64>,
    pub reduction_pct: Option<f64>,
    pub energy_spent: Option<f64>,
    pub budgeted_energy: Option<f64>,
    pub matched_energy: Option<f64>,
    pub n_poisoned: Option<usize>,
    pub zero_gradient_count: Option<usize>,
    pub attack_objective: Option<f64>,
    pub audit_passed: Option<bool>,
    pub audit_detail: Option<String>,
    pub detectors: Vec<DetectorRow>,
    pub attack: AttackConfig,
    pub dataset_fingerprint: u64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub victim: String,
    pub config: String,
    pub strategy: String,
    pub n: usize,
    pub mean_clean: f64,
    pub mean_post_attack: f64,
    /// Absent for a single seed.
    pub se_post_attack: Option<f64>,
    pub reduction_pct: Option<f64>,
    pub mean_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    /// Mean over seeds of `worse - better` (positive when `better` does more damage).
    pub mean_diff: f64,
    pub se_diff: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyVerdict {
    pub victim: String,
    pub config: String,
    /// Means of GlobalAllocation, LocalGreedy, RandomSubset, RandomNoise, Clean.
    pub means: [f64; 5],
    pub ordering_holds: bool,
    pub global_vs_local: PairedComparison,
    pub local_vs_noise: PairedComparison,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthVerdict {
    pub victim: String,
    pub config: String,
    pub detector: DetectorKind,
    pub mean_auc_global: Option<f64>,
    pub mean_auc_noise_full: Option<f64>,
    pub mean_diff: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimDiagnostic {
    pub victim: String,
    pub seed: u64,
    pub clean_score: f64,
    pub clean_se: Option<f64>,
    pub influence_spearman: Option<f64>,
    pub hessian_condition: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub units: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub diagnostics: Vec<VictimDiagnostic>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub hierarchy: Vec<HierarchyVerdict>,
    pub stealth: Vec<StealthVerdict>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failure.is_some()).count()
    }

    pub fn all_audits_pass(&self) -> bool {
        self.rows.iter().all(|r| r.failure.is_some() || r.audit_passed == Some(true))
    }
}

/// FNV-1a over the canonical JSON of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct SeedStage {
    seed: u64,
    env: Environment,
    data: TransitionDataset,
    scales: FieldScales,
}

struct VictimStage {
    clean: VictimModel,
    clean_score: f64,
    clean_se: Option<f64>,
    records: BTreeMap<Surface, Vec<SensitivityRecord>>,
}

fn build_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedStage> {
    let env = Environment::new(cfg.env.spec(seed)?)?;
    let data = generate_dataset(&env, cfg.dataset.size, cfg.dataset.quality, seed)?;
    let scales = field_scales(cfg.units, &data);
    Ok(SeedStage { seed, env, data, scales })
}

fn build_victim(
    cfg: &ExperimentConfig,
    victim: &VictimConfig,
    stage: &SeedStage,
    surfaces: &[Surface],
) -> Result<VictimStage> {
    let fm = victim.feature_map(&stage.data.spec)?;
    let clean = train(victim.algo, &stage.data, fm, &victim.train_config())?;
    let ret = evaluate_policy(&stage.env, &clean, cfg.n_eval_episodes, evaluation_seed(stage.seed))?;
    let mut records = BTreeMap::new();
    for &s in surfaces {
        records.insert(s, score_dataset(&clean, &stage.data, s)?);
    }
    Ok(VictimStage { clean, clean_score: ret.mean, clean_se: ret.se, records })
}

fn run_cell(
    cfg: &ExperimentConfig,
    victim: &VictimConfig,
    stage: &SeedStage,
    vs: &VictimStage,
    spec: &AttackSpec,
    row: &mut ReportRow,
) -> Result<()> {
    let records = vs
        .records
        .get(&spec.attack.surface)
        .ok_or_else(|| LabError::Argument("missing sensitivity records".into()))?;
    let p = run_attack(&stage.data, records, &row.attack, &stage.scales)?;
    let audit = audit_energy(&p);
    row.energy_spent = Some(p.total_l2_energy);
    row.budgeted_energy = Some(p.budgeted_energy);
    row.n_poisoned = Some(p.n_poisoned);
    row.zero_gradient_count = Some(p.zero_gradient_count);
    row.attack_objective = Some(p.attack_objective);
    row.audit_passed = Some(audit.passed());
    row.audit_detail = Some(audit.detail);
    let poisoned = apply(&stage.data, &p)?;
    let fm = victim.feature_map(&stage.data.spec)?;
    let model = train(victim.algo, &poisoned, fm, &victim.train_config())?;
    let ret = evaluate_policy(&stage.env, &model, cfg.n_eval_episodes, evaluation_seed(stage.seed))?;
    row.post_attack_score = Some(ret.mean);
    row.reduction_pct = reduction_pct(vs.clean_score, ret.mean).ok();
    for &kind in &cfg.detectors.kinds {
        let s = stealth_row(kind, &spec.label, &stage.data, &poisoned, &cfg.detectors.params)?;
        row.detectors.push(DetectorRow {
            detector: kind,
            recall: s.recall,
            precision: s.precision,
            auc: s.auc,
            auc_vs_base: s.auc_vs_base,
            max_score: s.max_score,
            flagged_count: s.flagged_count,
        });
    }
    Ok(())
}

fn diagnostic(victim: &str, stage: &SeedStage, vs: &VictimStage) -> VictimDiagnostic {
    let (influence_spearman, hessian_condition, note) =
        match exact_influence_oracle(&vs.clean, &stage.data, INFLUENCE_DAMPING) {
            Ok(r) => (r.rank_correlation_vs_proxy, Some(r.hessian_condition_number), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
    VictimDiagnostic {
        victim: victim.to_string(),
        seed: stage.seed,
        clean_score: vs.clean_score,
        clean_se: vs.clean_se,
        influence_spearman,
        hessian_condition,
        note,
    }
}

/// Runs the full pipeline for every seed. Stage failures become failure rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let attacks = cfg.attack_grid()?;
    let mut surfaces: Vec<Surface> = attacks.iter().map(|a| a.attack.surface).collect();
    surfaces.sort();
    surfaces.dedup();
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let env_kind = cfg.env.kind;

    let stages: Vec<Result<SeedStage>> = par::map(&seeds, |s| build_seed(cfg, *s));
    let pairs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|i| (0..cfg.victims.len()).map(move |v| (i, v)))
        .collect();
    let victims: Vec<Result<VictimStage>> = par::map(&pairs, |(i, v)| match &stages[*i] {
        Ok(st) => build_victim(cfg, &cfg.victims[*v], st, &surfaces),
        Err(e) => Err(LabError::Numerical(format!("dataset stage failed: {e}"))),
    });

    let cells: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..attacks.len()).map(move |a| (p, a)))
        .collect();
    let rows: Vec<ReportRow> = par::map(&cells, |(p, a)| {
        let (i, v) = pairs[*p];
        let spec = &attacks[*a];
        let victim = &cfg.victims[v];
        let mut attack = spec.attack.clone();
        attack.seed = attack_seed(&spec.attack, seeds[i]);
        let mut row = ReportRow {
            victim: victim.label(env_kind),
            config: spec.group.clone(),
            strategy: spec.label.clone(),
            seed: seeds[i],
            clean_score: f64::NAN,
            post_attack_score: None,
            reduction_pct: None,
            energy_spent: None,
            budgeted_energy: None,
            matched_energy: spec.matched_energy,
            n_poisoned: None,
            zero_gradient_count: None,
            attack_objective: None,
            audit_passed: None,
            audit_detail: None,
            detectors: Vec::new(),
            attack,
            dataset_fingerprint: 0,
            failure: None,
        };
        let outcome = match (&stages[i], &victims[*p]) {
            (Ok(st), Ok(vs)) => {
                row.clean_score = vs.clean_score;
                row.dataset_fingerprint = st.data.fingerprint();
                run_cell(cfg, victim, st, vs, spec, &mut row)
            }
            (Err(e), _) | (_, Err(e)) => Err(LabError::Numerical(e.to_string())),
        };
        if let Err(e) = outcome {
            row.failure = Some(e.to_string());
            row.post_attack_score = None;
            row.reduction_pct = None;
            row.detectors.clear();
        }
        if row.clean_score.is_nan() {
            row.clean_score = 0.0;
        }
        row
    });

    let diagnostics: Vec<VictimDiagnostic> = pairs
        .iter()
        .zip(&victims)
        .filter_map(|((i, v), vs)| {
            let st = stages[*i].as_ref().ok()?;
            let vs = vs.as_ref().ok()?;
            let label = cfg.victims[*v].label(env_kind);
            // One influence check per victim keeps the run cheap.
            if *i == 0 {
                return Some(diagnostic(&label, st, vs));
            }
            Some(VictimDiagnostic {
                victim: label,
                seed: st.seed,
                clean_score: vs.clean_score,
                clean_se: vs.clean_se,
                influence_spearman: None,
                hessian_condition: None,
                note: None,
            })
        })
        .collect();

    let summary = summarize(&rows);
    let hierarchy = hierarchy_verdicts(&rows, &diagnostics);
    let stealth = stealth_verdicts(&rows);
    Ok(ExperimentReport {
        units: cfg.units.describe().to_string(),
        config_hash: content_hash(cfg),
        config: ExperimentConfig { output_dir: None, ..cfg.clone() },
        seeds,
        diagnostics,
        rows,
        summary,
        hierarchy,
        stealth,
    })
}

fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Groups `(victim, config, strategy)` in first-appearance order.
fn group_keys(rows: &[ReportRow]) -> Vec<(String, String, String)> {
    let mut keys = Vec::new();
    for r in rows {
        let k = (r.victim.clone(), r.config.clone(), r.strategy.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    group_keys(rows)
        .into_iter()
        .filter_map(|(victim, config, strategy)| {
            let ok: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.victim == victim && r.config == config && r.strategy == strategy)
                .filter(|r| r.failure.is_none())
                .collect();
            if ok.is_empty() {
                return None;
            }
            let post: Vec<f64> = ok.iter().filter_map(|r| r.post_attack_score).collect();
            let clean: Vec<f64> = ok.iter().map(|r| r.clean_score).collect();
            let (mean_post, se_post) = mean_se(&post);
            let (mean_clean, _) = mean_se(&clean);
            let energy: Vec<f64> = ok.iter().filter_map(|r| r.energy_spent).collect();
            Some(SummaryRow {
                victim,
                config,
                strategy,
                n: post.len(),
                mean_clean,
                mean_post_attack: mean_post,
                se_post_attack: se_post,
                reduction_pct: reduction_pct(mean_clean, mean_post).ok(),
                mean_energy: mean_se(&energy).0,
            })
        })
        .collect()
}

/// Paired per-seed differences `worse - better`.
fn paired(worse: &[(u64, f64)], better: &[(u64, f64)]) -> PairedComparison {
    let diffs: Vec<f64> = worse
        .iter()
        .filter_map(|(s, w)| better.iter().find(|(t, _)| t == s).map(|(_, b)| w - b))
        .collect();
    if diffs.is_empty() {
        return PairedComparison { mean_diff: 0.0, se_diff: None, significant: false };
    }
    let (mean, se) = mean_se(&diffs);
    PairedComparison {
        mean_diff: mean,
        se_diff: se,
        significant: se.is_some_and(|se| mean > 2.0 * se),
    }
}

fn scores(rows: &[ReportRow], victim: &str, config: &str, strategy: &str) -> Vec<(u64, f64)> {
    rows.iter()
        .filter(|r| r.victim == victim && r.config == config && r.strategy == strategy)
        .filter_map(|r| r.post_attack_score.map(|s| (r.seed, s)))
        .collect()
}

fn mean_of(v: &[(u64, f64)]) -> f64 {
    v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64
}

/// `Global <= LocalGreedy <= RandomSubset <= RandomNoise <= Clean` on means, with
/// Global < LocalGreedy and LocalGreedy < RandomNoise at 2 paired standard errors.
pub fn hierarchy_verdicts(rows: &[ReportRow], diagnostics: &[VictimDiagnostic]) -> Vec<HierarchyVerdict> {
    let mut groups: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.victim.clone(), r.config.clone());
        if !groups.contains(&k) {
            groups.push(k);
        }
    }
    let names = [
        Strategy::GlobalAllocation.label(),
        Strategy::LocalGreedy.label(),
        Strategy::RandomSubset.label(),
        Strategy::RandomNoise.label(),
    ];
    groups
        .into_iter()
        .filter_map(|(victim, config)| {
            let s: Vec<Vec<(u64, f64)>> = names.iter().map(|n| scores(rows, &victim, &config, n)).collect();
            if s.iter().any(|v| v.is_empty()) {
                return None;
            }
            let clean: Vec<(u64, f64)> = diagnostics
                .iter()
                .filter(|d| d.victim == victim)
                .map(|d| (d.seed, d.clean_score))
                .collect();
            let means = [mean_of(&s[0]), mean_of(&s[1]), mean_of(&s[2]), mean_of(&s[3]), mean_of(&clean)];
            let ordering_holds = means.windows(2).all(|w| w[0] <= w[1]);
            let global_vs_local = paired(&s[1], &s[0]);
            let local_vs_noise = paired(&s[3], &s[1]);
            let passed = ordering_holds && global_vs_local.significant && local_vs_noise.significant;
            Some(HierarchyVerdict {
                victim,
                config,
                means,
                ordering_holds,
                global_vs_local,
                local_vs_noise,
                passed,
            })
        })
        .collect()
}

/// Each detector's base-referenced AUC must be at least 0.05 lower for
/// GlobalAllocation than for full-support RandomNoise.
pub fn stealth_verdicts(rows: &[ReportRow]) -> Vec<StealthVerdict> {
    let mut out = Vec::new();
    let global = Strategy::GlobalAllocation.label();
    for (victim, config, strategy) in group_keys(rows) {
        if strategy != NOISE_FULL_LABEL {
            continue;
        }
        let auc_of = |label: &str, kind: DetectorKind| -> Option<f64> {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.victim == victim && r.config == config && r.strategy == label)
                .map(|r| {
                    r.detectors
                        .iter()
                        .find(|d| d.detector == kind)
                        .and_then(|d| d.auc_vs_base)
                })
                .collect::<Option<Vec<f64>>>()?;
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let kinds: Vec<DetectorKind> = rows
            .iter()
            .find(|r| r.victim == victim && r.config == config && r.strategy == strategy)
            .map(|r| r.detectors.iter().map(|d| d.detector).collect())
            .unwrap_or_default();
        for kind in kinds {
            let g = auc_of(global, kind);
            let n = auc_of(NOISE_FULL_LABEL, kind);
            let diff = g.zip(n).map(|(g, n)| n - g);
            out.push(StealthVerdict {
                victim: victim.clone(),
                config: config.clone(),
                detector: kind,
                mean_auc_global: g,
                mean_auc_noise_full: n,
                mean_diff: diff,
                passed: diff.is_some_and(|d| d >= 0.05),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests;
