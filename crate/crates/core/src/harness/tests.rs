use super::*;
use crate::attacks::{matched_budget, matched_noise_bound, Support};
use crate::envlab::{BehaviorQuality, EnvKind};
use crate::victims::AlgoTag;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_benchmark(EnvKind::LineWorld);
    cfg.n_seeds = 2;
    cfg.n_eval_episodes = 100;
    cfg.dataset = DatasetConfig { size: 1500, quality: BehaviorQuality::Medium };
    cfg.grid.as_mut().unwrap().configs = vec![(0.02, 1.0)];
    cfg
}

fn zero_attack(label: &str, strategy: Strategy) -> NamedAttack {
    NamedAttack {
        label: label.into(),
        group: "zero".into(),
        attack: AttackConfig {
            strategy,
            rho: 1.0,
            epsilon_local: Some(0.0),
            c_total: None,
            surface: Surface::Both,
            support: Support::All,
            seed: 1,
        },
    }
}

#[test]
fn reduction_reproduces_table_arithmetic() {
    let a = reduction_pct(3718.0, 681.0).unwrap();
    assert!((a - 81.683_700_914_470_14).abs() < 1e-9);
    assert_eq!(format!("{a:.1}"), "81.7");
    assert_eq!(format!("{:.1}", reduction_pct(2984.0, 522.0).unwrap()), "82.5");
    assert_eq!(reduction_pct(0.37, 0.37).unwrap(), 0.0);
    assert!(matches!(reduction_pct(0.0, 1.0), Err(LabError::UndefinedMetric(_))));
}

#[test]
fn zero_energy_attacks_leave_the_score_unchanged() {
    let mut cfg = small_config();
    cfg.grid = None;
    cfg.attacks = vec![
        zero_attack("noise0", Strategy::RandomNoise),
        zero_attack("local0", Strategy::LocalGreedy),
    ];
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.rows.len(), 4);
    for row in &r.rows {
        assert_eq!(row.post_attack_score, Some(row.clean_score));
        assert_eq!(row.reduction_pct, Some(0.0));
        assert_eq!(row.energy_spent, Some(0.0));
    }
}

#[test]
fn single_seed_has_no_standard_errors() {
    let mut cfg = small_config();
    cfg.n_seeds = 1;
    let r = run_experiment(&cfg).unwrap();
    assert!(r.summary.iter().all(|s| s.se_post_attack.is_none()));
    assert!(r.hierarchy.iter().all(|h| h.global_vs_local.se_diff.is_none() && !h.passed));
}

#[test]
fn runs_are_deterministic_and_json_round_trips() {
    let cfg = small_config();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let text = to_json(&a);
    assert_eq!(text, to_json(&b));
    assert_eq!(markdown(&a), markdown(&b));
    let back = from_json(&text).unwrap();
    assert_eq!(to_json(&back), text);
    assert!(a.all_audits_pass());
    assert_eq!(a.failures(), 0);
    // Strategies and the full-support noise attack for each of two seeds.
    assert_eq!(a.rows.len(), 2 * 5);
}

#[test]
fn grid_expansion_matches_budgets() {
    let cfg = small_config();
    let grid = cfg.attack_grid().unwrap();
    let energy = matched_budget(0.02, 1500, 1.0);
    assert_eq!(energy, 30.0);
    for a in &grid {
        assert_eq!(a.matched_energy, Some(energy));
        match (a.label.as_str(), a.attack.strategy) {
            (_, Strategy::GlobalAllocation) => assert_eq!(a.attack.c_total, Some(energy)),
            (NOISE_FULL_LABEL, Strategy::RandomNoise) => {
                assert_eq!(a.attack.rho, 1.0);
                let bound = a.attack.epsilon_local.unwrap();
                // Expected energy: N * dims * bound^2 / 3.
                assert!((1500.0 * 2.0 * bound * bound / 3.0 - energy).abs() < 1e-9);
            }
            (_, Strategy::RandomNoise) => {
                assert_eq!(a.attack.epsilon_local, Some(matched_noise_bound(1.0, 2)))
            }
            _ => assert_eq!(a.attack.epsilon_local, Some(1.0)),
        }
    }
}

#[test]
fn failing_cells_become_failure_rows() {
    let mut cfg = small_config();
    cfg.grid = None;
    let mut bad = zero_attack("tiny", Strategy::LocalGreedy);
    bad.attack.rho = 1e-6;
    bad.attack.epsilon_local = Some(0.5);
    cfg.attacks = vec![bad, zero_attack("ok", Strategy::RandomNoise)];
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.failures(), 2);
    let failed: Vec<_> = r.rows.iter().filter(|x| x.failure.is_some()).collect();
    assert!(failed.iter().all(|x| x.strategy == "tiny" && x.post_attack_score.is_none()));
    assert!(r.summary.iter().all(|s| s.strategy == "ok"));
    let text = to_json(&r);
    assert_eq!(to_json(&from_json(&text).unwrap()), text);
}

#[test]
fn config_validation_names_the_field() {
    let mut cfg = small_config();
    cfg.grid = None;
    let mut a = zero_attack("g", Strategy::GlobalAllocation);
    a.attack.epsilon_local = None;
    cfg.attacks = vec![a];
    match cfg.validate() {
        Err(LabError::Config { field, .. }) => assert_eq!(field, "c_total"),
        other => panic!("unexpected {other:?}"),
    }
    let mut cfg = small_config();
    cfg.n_seeds = 0;
    assert!(matches!(cfg.validate(), Err(LabError::Config { .. })));
    let mut cfg = small_config();
    cfg.grid = None;
    assert!(matches!(cfg.validate(), Err(LabError::Config { field, .. }) if field == "attack_grid"));
}

#[test]
fn toml_round_trip_and_unknown_keys() {
    let mut cfg = small_config();
    cfg.attacks = vec![zero_attack("extra", Strategy::RandomSubset)];
    let text = cfg.to_toml();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    let bad = text.replace("n_eval_episodes", "n_eval_episode");
    assert!(matches!(ExperimentConfig::from_toml(&bad), Err(LabError::Parse { .. })));
}

#[test]
fn minimal_toml_uses_defaults() {
    let text = r#"
n_eval_episodes = 50

[env]
kind = "GridWorld"
grid_size = 4

[dataset]
size = 300
quality = "medium"

[[victims]]
algo = "TabQ"

[grid]
configs = [[0.1, 0.5]]
surface = "reward"
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.n_seeds, 5);
    assert_eq!(cfg.units, Units::RobustStd);
    assert_eq!(cfg.victims[0].algo, AlgoTag::TabQ);
    assert_eq!(cfg.detectors.kinds.len(), 3);
    assert_eq!(cfg.attack_grid().unwrap().len(), 4);
}

fn synthetic_row(strategy: &str, seed: u64, post: f64) -> ReportRow {
    ReportRow {
        victim: "V".into(),
        config: "C".into(),
        strategy: strategy.into(),
        seed,
        clean_score: 1.0,
        post_attack_score: Some(post),
        reduction_pct: Some(100.0 * (1.0 - post)),
        energy_spent: Some(1.0),
        budgeted_energy: Some(1.0),
        matched_energy: Some(1.0),
        n_poisoned: Some(1),
        zero_gradient_count: Some(0),
        attack_objective: Some(0.0),
        audit_passed: Some(true),
        audit_detail: None,
        detectors: vec![],
        attack: zero_attack("x", Strategy::RandomNoise).attack,
        dataset_fingerprint: 0,
        failure: None,
    }
}

#[test]
fn hierarchy_verdict_uses_paired_differences() {
    let mut rows = Vec::new();
    let diag: Vec<VictimDiagnostic> = (0..4)
        .map(|s| VictimDiagnostic {
            victim: "V".into(),
            seed: s,
            clean_score: 1.0,
            clean_se: None,
            influence_spearman: None,
            hessian_condition: None,
            note: None,
        })
        .collect();
    for s in 0..4u64 {
        let j = 0.01 * s as f64;
        rows.push(synthetic_row("GlobalAllocation", s, 0.2 + j));
        rows.push(synthetic_row("LocalGreedy", s, 0.4 + j));
        rows.push(synthetic_row("RandomSubset", s, 0.6 + j));
        rows.push(synthetic_row("RandomNoise", s, 0.8 + j));
    }
    let h = &hierarchy_verdicts(&rows, &diag)[0];
    assert!(h.ordering_holds && h.passed);
    assert!((h.global_vs_local.mean_diff - 0.2).abs() < 1e-12);
    assert!(h.global_vs_local.se_diff.unwrap() < 1e-12);
    // Swap one seed so Global is no longer reliably better.
    rows[0].post_attack_score = Some(0.9);
    let h = &hierarchy_verdicts(&rows, &diag)[0];
    assert!(!h.passed);
}

#[test]
fn markdown_bolds_the_row_minimum() {
    let rows = vec![
        synthetic_row("RandomNoise", 0, 0.8),
        synthetic_row("LocalGreedy", 0, 0.3),
        synthetic_row("GlobalAllocation", 0, 0.5),
    ];
    let report = ExperimentReport {
        units: Units::RobustStd.describe().into(),
        config_hash: "0".into(),
        config: small_config(),
        seeds: vec![0],
        diagnostics: vec![],
        summary: summarize(&rows),
        hierarchy: vec![],
        stealth: vec![],
        rows,
    };
    let md = markdown(&report);
    let line = md.lines().find(|l| l.starts_with("| V |")).unwrap();
    assert!(line.contains("**0.3000**"));
    assert_eq!(line.matches("**").count(), 2);
    assert!(line.ends_with(" 50.0% |"));
}

#[test]
fn emit_writes_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&small_config()).unwrap();
    let files = emit_report(&r, dir.path(), &ReportFormat::ALL).unwrap();
    assert_eq!(files.len(), 4);
    let det = std::fs::read_to_string(dir.path().join("detection.csv")).unwrap();
    assert!(det.starts_with("detector,attack,recall,precision,auc,max_score,flagged_count"));
    assert_eq!(det.lines().count(), 1 + r.rows.len() * 3);
    let blocked = dir.path().join("report.csv").join("nested");
    assert!(matches!(emit_report(&r, &blocked, &ReportFormat::ALL), Err(LabError::Io { .. })));
}
