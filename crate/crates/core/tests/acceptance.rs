//! Exit criteria. Each test prints one `PASS`/`FAIL` line straight to stdout
//! (bypassing libtest capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Pareto};

use poisonlab::allocator::{global_allocate, numerical_allocate_oracle, objective};
use poisonlab::attacks::Strategy;
use poisonlab::envlab::{generate_dataset, BehaviorQuality, EnvKind, Environment, MdpSpec, Transition};
use poisonlab::harness::{reduction_pct, run_experiment, ExperimentConfig, ExperimentReport, NOISE_FULL_LABEL};
use poisonlab::sensitivity::{exact_influence_oracle, score_transition, td_error, ScoreOptions, Surface};
use poisonlab::victims::{train, AlgoTag, FeatureKind, FeatureMap, TrainConfig, VictimModel};

fn verdict(id: u32, name: &str, passed: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {id:>2} [{}] {name}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(passed, "criterion {id} failed: {detail}");
}

struct Instance {
    deltas: Vec<f64>,
    c_total: f64,
}

fn instances() -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sizes = [2usize, 10, 1000];
    let budgets = [0.1, 1.0, 100.0];
    let lognormal = LogNormal::new(0.0, 1.0).unwrap();
    let pareto = Pareto::new(1.0, 1.5).unwrap();
    (0..100)
        .map(|k| {
            let n = sizes[k % 3];
            let c_total = budgets[(k / 3) % 3];
            let deltas = (0..n)
                .map(|_| match (k / 9) % 3 {
                    0 => rng.gen_range(0.0..1.0),
                    1 => lognormal.sample(&mut rng),
                    _ => pareto.sample(&mut rng),
                })
                .collect();
            Instance { deltas, c_total }
        })
        .collect()
}

/// A random point of the feasible set `{eps >= 0, |eps|^2 <= C}`.
fn random_feasible(n: usize, c_total: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(rng.gen_range(1..4))).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let radius = c_total.sqrt() * rng.gen::<f64>().sqrt();
    raw.iter().map(|x| x * radius / norm).collect()
}

#[test]
fn criterion_01_closed_form_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_gap, mut worst_kkt, mut worst_budget) = (0.0f64, 0.0f64, 0.0f64);
    let mut dominated = true;
    for inst in instances() {
        let plan = global_allocate(&inst.deltas, inst.c_total).unwrap();
        let oracle = numerical_allocate_oracle(&inst.deltas, inst.c_total, 1e-13).unwrap();
        for (a, b) in plan.epsilons.iter().zip(&oracle.epsilons) {
            worst_gap = worst_gap.max((a - b).abs());
        }
        let dmax = inst.deltas.iter().fold(0.0f64, |m, d| m.max(*d));
        for (d, e) in inst.deltas.iter().zip(&plan.epsilons) {
            worst_kkt = worst_kkt.max((d - 2.0 * plan.lambda * e).abs() / dmax);
        }
        worst_budget = worst_budget.max((plan.spent() - inst.c_total).abs() / inst.c_total);
        let best = objective(&inst.deltas, &plan.epsilons);
        for _ in 0..1000 {
            let eps = random_feasible(inst.deltas.len(), inst.c_total, &mut rng);
            if objective(&inst.deltas, &eps) > best * (1.0 + 1e-12) {
                dominated = false;
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = worst_gap <= 1e-6
        && worst_kkt <= 1e-10
        && worst_budget <= 1e-9
        && dominated
        && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "closed-form allocation optimality",
        passed,
        &format!(
            "max |eps - oracle| {worst_gap:.2e}, KKT residual {worst_kkt:.2e}, budget error {worst_budget:.2e}, dominates random {dominated}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_02_proportionality() {
    let mut worst = 0.0f64;
    for inst in instances() {
        let plan = global_allocate(&inst.deltas, inst.c_total).unwrap();
        let nz: Vec<usize> = (0..inst.deltas.len()).filter(|i| inst.deltas[*i] > 0.0).collect();
        for &i in &nz {
            for &j in &nz {
                let lhs = plan.epsilons[i] * inst.deltas[j];
                let rhs = plan.epsilons[j] * inst.deltas[i];
                worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
            }
        }
    }
    verdict(
        2,
        "strict proportionality to |delta|",
        worst <= 1e-10,
        &format!("max relative cross-product mismatch {worst:.2e}"),
    );
}

fn random_model(fm: FeatureMap, gamma: f64, rng: &mut ChaCha8Rng) -> VictimModel {
    let theta = (0..fm.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    VictimModel { feature_map: fm, theta, gamma, algo_tag: AlgoTag::LinFQI, train_log: vec![] }
}

fn random_transition(spec: &MdpSpec, rng: &mut ChaCha8Rng) -> Transition {
    let bounds = spec.state_bounds();
    let mut draw = || -> Vec<f64> {
        bounds.iter().map(|(lo, hi)| rng.gen_range(lo + 0.05 * (hi - lo)..hi - 0.05 * (hi - lo))).collect()
    };
    let s = draw();
    let s_next = draw();
    Transition {
        idx: 0,
        s,
        a: rng.gen_range(0..spec.n_actions),
        r: rng.gen_range(-1.0..1.0),
        s_next,
        terminal: rng.gen_bool(0.1),
        poisoned: false,
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

#[test]
fn criterion_03_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let line = MdpSpec::line_world(0);
    let grid = MdpSpec::grid_world(5, 0);
    let setups = [
        (line.clone(), FeatureMap::default_for(&line).unwrap()),
        (line.clone(), FeatureMap::new(FeatureKind::Polynomial { degree: 3 }, line.state_bounds(), 2).unwrap()),
        (
            grid.clone(),
            FeatureMap::new(
                FeatureKind::RbfGrid { centers_per_dim: 5, bandwidth: 0.2 },
                grid.state_bounds(),
                4,
            )
            .unwrap(),
        ),
    ];
    let (mut checked, mut worst_theta, mut worst_state) = (0usize, 0.0f64, 0.0f64);
    let h = 1e-6;
    while checked < 200 {
        let (spec, fm) = &setups[checked % setups.len()];
        let model = random_model(fm.clone(), spec.gamma, &mut rng);
        let t = random_transition(spec, &mut rng);
        let delta = td_error(&model, &t).unwrap();
        if delta.abs() <= 1e-3 {
            continue;
        }
        // Loss 0.5 * delta^2 with the bootstrap target frozen at the current theta.
        let target = t.r + if t.terminal { 0.0 } else { model.gamma * model.max_q(&t.s_next) };
        let phi = model.feature_map.phi(&t.s, t.a);
        let loss = |theta: &[f64]| {
            let q: f64 = phi.iter().zip(theta).map(|(p, w)| p * w).sum();
            0.5 * (target - q).powi(2)
        };
        let analytic: Vec<f64> = phi.iter().map(|p| -delta * p).collect();
        let fd: Vec<f64> = (0..model.theta.len())
            .map(|k| {
                let mut up = model.theta.clone();
                let mut dn = model.theta.clone();
                up[k] += h;
                dn[k] -= h;
                (loss(&up) - loss(&dn)) / (2.0 * h)
            })
            .collect();
        worst_theta = worst_theta.max(rel(&fd, &analytic));

        let rec = score_transition(&model, &t, &ScoreOptions::new(Surface::State)).unwrap();
        let fd_state: Vec<f64> = (0..t.s.len())
            .map(|j| {
                let mut up = t.clone();
                let mut dn = t.clone();
                up.s[j] += h;
                dn.s[j] -= h;
                (td_error(&model, &up).unwrap().abs() - td_error(&model, &dn).unwrap().abs()) / (2.0 * h)
            })
            .collect();
        worst_state = worst_state.max(rel(&fd_state, &rec.grad_state));
        checked += 1;
    }
    verdict(
        3,
        "TD-loss and state gradients vs central differences",
        worst_theta <= 1e-6 && worst_state <= 1e-6,
        &format!("{checked} transitions, worst relative error theta {worst_theta:.2e}, state {worst_state:.2e}"),
    );
}

#[test]
fn criterion_04_influence_proxy() {
    let start = Instant::now();
    let env = Environment::new(MdpSpec::line_world(0)).unwrap();
    let data = generate_dataset(&env, 5000, BehaviorQuality::Medium, 0).unwrap();
    let fm = FeatureMap::default_for(&data.spec).unwrap();
    let model = train(AlgoTag::LinFQI, &data, fm, &TrainConfig::fqi_default()).unwrap();
    let r = exact_influence_oracle(&model, &data, 1e-3).unwrap();
    let rho = r.rank_correlation_vs_proxy;
    let elapsed = start.elapsed();
    verdict(
        4,
        "influence proxy rank correlation",
        rho.is_some_and(|v| v > 0.5) && elapsed < Duration::from_secs(60),
        &format!(
            "Spearman {} (condition number {:.3e}), {elapsed:.2?}",
            rho.map_or("undefined".into(), |v| format!("{v:.4}")),
            r.hessian_condition_number
        ),
    );
}

struct Bench {
    reports: Vec<ExperimentReport>,
    elapsed: Duration,
}

fn bench_config(kind: EnvKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_benchmark(kind);
    cfg.grid.as_mut().unwrap().configs = vec![(0.01, 0.5)];
    cfg
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let reports = [EnvKind::LineWorld, EnvKind::GridWorld]
            .into_iter()
            .map(|k| run_experiment(&bench_config(k)).unwrap())
            .collect();
        Bench { reports, elapsed: start.elapsed() }
    })
}

#[test]
fn criterion_05_damage_hierarchy() {
    let b = bench();
    let mut passed = b.elapsed < Duration::from_secs(15 * 60);
    let mut parts = Vec::new();
    for r in &b.reports {
        assert_eq!(r.failures(), 0);
        for h in &r.hierarchy {
            passed &= h.passed;
            parts.push(format!(
                "{} G {:.4} L {:.4} S {:.4} N {:.4} C {:.4} order {} G<L {:+.4}+-{:.4} L<N {:+.4}+-{:.4}",
                h.victim,
                h.means[0],
                h.means[1],
                h.means[2],
                h.means[3],
                h.means[4],
                h.ordering_holds,
                h.global_vs_local.mean_diff,
                h.global_vs_local.se_diff.unwrap_or(f64::NAN),
                h.local_vs_noise.mean_diff,
                h.local_vs_noise.se_diff.unwrap_or(f64::NAN),
            ));
        }
    }
    parts.push(format!("{:.1?}", b.elapsed));
    verdict(5, "damage hierarchy at (0.01, 0.5)", passed, &parts.join("; "));
}

#[test]
fn criterion_06_meaningful_degradation() {
    let b = bench();
    let mut best = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for r in &b.reports {
        for s in r.summary.iter().filter(|s| s.strategy == Strategy::GlobalAllocation.label()) {
            let red = reduction_pct(s.mean_clean, s.mean_post_attack).unwrap();
            best = best.max(red);
            parts.push(format!("{} {red:.2}%", s.victim));
        }
    }
    verdict(
        6,
        "GlobalAllocation reduction >= 30% on some victim",
        best >= 30.0,
        &parts.join(", "),
    );
}

#[test]
fn criterion_07_stealth_direction() {
    let b = bench();
    let line = &b.reports[0];
    let mut passed = !line.stealth.is_empty();
    let mut parts = Vec::new();
    for s in &line.stealth {
        passed &= s.passed;
        parts.push(format!(
            "{} Global {:.4} vs {NOISE_FULL_LABEL} {:.4} (diff {:+.4})",
            s.detector.label(),
            s.mean_auc_global.unwrap_or(f64::NAN),
            s.mean_auc_noise_full.unwrap_or(f64::NAN),
            s.mean_diff.unwrap_or(f64::NAN),
        ));
    }
    verdict(7, "detector AUC lower for GlobalAllocation", passed, &parts.join("; "));
}

#[test]
fn criterion_08_budget_accounting() {
    let b = bench();
    let mut rows = 0;
    let mut bad = Vec::new();
    for r in &b.reports {
        for row in &r.rows {
            rows += 1;
            let audit_ok = row.audit_passed == Some(true);
            let strategy = row.attack.strategy;
            let energy = row.energy_spent.unwrap_or(f64::NAN);
            let budgeted = row.budgeted_energy.unwrap_or(f64::NAN);
            let matched = row.matched_energy.unwrap_or(f64::NAN);
            let matching_ok = match strategy {
                Strategy::GlobalAllocation => (budgeted - matched).abs() <= 1e-6 * matched,
                Strategy::LocalGreedy | Strategy::RandomSubset => {
                    // Zero-gradient selections leave their share unspent.
                    let eps = row.attack.epsilon_local.unwrap();
                    let unspent = row.zero_gradient_count.unwrap() as f64 * eps * eps;
                    (budgeted + unspent - matched).abs() <= 1e-9 * matched
                }
                Strategy::RandomNoise => true,
            };
            let delivered_ok = energy <= budgeted * (1.0 + 1e-9);
            if !(audit_ok && matching_ok && delivered_ok) {
                bad.push(format!("{} {} seed {}", row.victim, row.strategy, row.seed));
            }
        }
    }
    verdict(
        8,
        "energy audit on every report row",
        bad.is_empty(),
        &format!("{rows} rows checked, {} violations {:?}", bad.len(), bad),
    );
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_poisonlab"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--seed", "11", "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        outputs.push(out);
    }
    let mut same = true;
    let files = ["report.csv", "detection.csv", "report.json", "report.md"];
    for f in files {
        same &= std::fs::read(outputs[0].join(f)).unwrap() == std::fs::read(outputs[1].join(f)).unwrap();
    }
    verdict(9, "byte-identical reports across runs", same, &format!("compared {files:?}"));
}

#[test]
fn criterion_10_reduction_metric() {
    let a = reduction_pct(3718.0, 681.0).unwrap();
    let b = reduction_pct(2984.0, 522.0).unwrap();
    let passed = format!("{a:.1}") == "81.7" && format!("{b:.1}") == "82.5";
    verdict(10, "reduction percentage arithmetic", passed, &format!("{a:.4}% and {b:.4}%"));
}
