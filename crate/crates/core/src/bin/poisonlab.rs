use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use poisonlab::attacks::{apply, audit_energy, run_attack, AttackConfig, Strategy, Support};
use poisonlab::defense::{stealth_row, DetectorKind};
use poisonlab::envlab::{evaluate_policy, generate_dataset, BehaviorQuality, EnvKind, Environment, TransitionDataset};
use poisonlab::harness::{
    emit_report, evaluation_seed, field_scales, from_json, run_experiment, DatasetConfig, EnvConfig,
    ExperimentConfig, ReportFormat, Units, VictimConfig,
};
use poisonlab::sensitivity::{records_to_csv, score_dataset, Surface};
use poisonlab::victims::{train, AlgoTag, VictimModel};
use poisonlab::{LabError, Result};

#[derive(Parser)]
#[command(name = "poisonlab", version, about = "Data-poisoning lab for offline RL")]
struct Cli {
    /// Base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: config output_dir, then $POISONLAB_OUT, then ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report formats: csv, json, markdown, all, or a comma-separated list.
    #[arg(long, global = true)]
    format: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy into a dataset file.
    Generate(GenerateArgs),
    /// Train a victim on a dataset.
    Train(TrainArgs),
    /// Write per-transition TD errors and influence proxies.
    Score(ScoreArgs),
    /// Apply one attack strategy.
    Attack(AttackArgs),
    /// Run the poison detectors on a dataset.
    Detect(DetectArgs),
    /// Roll out a trained victim's greedy policy.
    Evaluate(EvaluateArgs),
    /// Run a full experiment from --config.
    Run,
    /// Re-emit a stored report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvKind>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    quality: Option<BehaviorQuality>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    algo: Option<AlgoTag>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "reward")]
    surface: Surface,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    c_total: Option<f64>,
    #[arg(long, default_value = "reward")]
    surface: Surface,
    #[arg(long, default_value = "all", value_parser = parse_support)]
    support: Support,
    #[arg(long, default_value = "robust-std", value_parser = parse_units)]
    units: Units,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Clean base dataset, for AUC against unperturbed rows.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    z_threshold: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    k_remove: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset whose environment spec the rollouts use.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
}

fn parse_env(s: &str) -> std::result::Result<EnvKind, String> {
    match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
        "gridworld" | "grid" => Ok(EnvKind::GridWorld),
        "lineworld" | "line" => Ok(EnvKind::LineWorld),
        _ => Err(format!("unknown environment `{s}`")),
    }
}

fn parse_support(s: &str) -> std::result::Result<Support, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "all" => Ok(Support::All),
        "top_rho" => Ok(Support::TopRho),
        _ => Err(format!("unknown support `{s}`")),
    }
}

fn parse_units(s: &str) -> std::result::Result<Units, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "robust_std" => Ok(Units::RobustStd),
        "raw" => Ok(Units::Raw),
        _ => Err(format!("unknown units `{s}`")),
    }
}

struct Ctx {
    seed: Option<u64>,
    config: Option<ExperimentConfig>,
    out: PathBuf,
    formats: Vec<ReportFormat>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.or(self.config.as_ref().map(|c| c.seed)).unwrap_or(0)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| LabError::io(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn victim(&self, algo: Option<AlgoTag>, kind: EnvKind) -> VictimConfig {
        let from_cfg = self.config.as_ref().and_then(|c| c.victims.first().cloned());
        match (algo, from_cfg) {
            (Some(a), Some(v)) if v.algo == a => v,
            (Some(a), _) => VictimConfig { algo: a, features: None, train: None },
            (None, Some(v)) => v,
            (None, None) => VictimConfig {
                algo: if kind == EnvKind::GridWorld { AlgoTag::TabQ } else { AlgoTag::LinFQI },
                features: None,
                train: None,
            },
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    let cfg = ctx.config.as_ref();
    let mut env_cfg = cfg.map(|c| c.env.clone()).unwrap_or(EnvConfig {
        kind: EnvKind::LineWorld,
        grid_size: None,
        noise_std: None,
        gamma: None,
        horizon: None,
    });
    if let Some(k) = a.env {
        env_cfg.kind = k;
    }
    env_cfg.grid_size = a.grid_size.or(env_cfg.grid_size);
    env_cfg.noise_std = a.noise_std.or(env_cfg.noise_std);
    let ds = cfg.map(|c| c.dataset.clone()).unwrap_or(DatasetConfig {
        size: 20_000,
        quality: BehaviorQuality::Medium,
    });
    let n = a.n.unwrap_or(ds.size);
    let quality = a.quality.unwrap_or(ds.quality);
    let seed = ctx.seed();
    let env = Environment::new(env_cfg.spec(seed)?)?;
    let data = generate_dataset(&env, n, quality, seed)?;
    let path = ctx.out_file("dataset.ndjson")?;
    data.write(&path)?;
    print_json(&json!({
        "dataset": path,
        "n_transitions": data.len(),
        "fingerprint": format!("{:016x}", data.fingerprint()),
    }));
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let data = TransitionDataset::read(&a.data)?;
    let victim = ctx.victim(a.algo, data.spec.kind);
    let model = train(victim.algo, &data, victim.feature_map(&data.spec)?, &victim.train_config())?;
    let path = ctx.out_file("model.ndjson")?;
    model.write(&path)?;
    print_json(&json!({
        "model": path,
        "algo": model.algo_tag,
        "iterations": model.train_log.len(),
    }));
    Ok(())
}

fn score(ctx: &Ctx, a: &ScoreArgs) -> Result<()> {
    let data = TransitionDataset::read(&a.data)?;
    let model = VictimModel::read(&a.model)?;
    let records = score_dataset(&model, &data, a.surface)?;
    let path = ctx.out_file("sensitivity.csv")?;
    std::fs::write(&path, records_to_csv(&records, None)).map_err(|e| LabError::io(&path, e))?;
    print_json(&json!({ "sensitivity": path, "n": records.len() }));
    Ok(())
}

fn attack(ctx: &Ctx, a: &AttackArgs) -> Result<()> {
    let cfg = AttackConfig {
        strategy: a.strategy,
        rho: a.rho,
        epsilon_local: a.epsilon,
        c_total: a.c_total,
        surface: a.surface,
        support: a.support,
        seed: ctx.seed(),
    };
    cfg.validate()?;
    let data = TransitionDataset::read(&a.data)?;
    let model = VictimModel::read(&a.model)?;
    let records = if a.strategy == Strategy::RandomNoise {
        Vec::new()
    } else {
        score_dataset(&model, &data, a.surface)?
    };
    let p = run_attack(&data, &records, &cfg, &field_scales(a.units, &data))?;
    let audit = audit_energy(&p);
    let pert = ctx.out_file("perturbations.ndjson")?;
    p.write(&pert)?;
    let poisoned = apply(&data, &p)?;
    let pd = ctx.out_file("poisoned.ndjson")?;
    poisoned.write(&pd)?;
    print_json(&json!({
        "perturbations": pert,
        "poisoned_dataset": pd,
        "manifest": p.manifest(),
        "audit": audit,
    }));
    Ok(())
}

fn detect(ctx: &Ctx, a: &DetectArgs) -> Result<()> {
    let data = TransitionDataset::read(&a.data)?;
    let base = match &a.base {
        Some(p) => TransitionDataset::read(p)?,
        None => {
            let mut b = data.clone();
            b.transitions.iter_mut().for_each(|t| t.poisoned = false);
            b
        }
    };
    let mut params = ctx.config.as_ref().map(|c| c.detectors.params).unwrap_or_default();
    params.z_threshold = a.z_threshold.unwrap_or(params.z_threshold);
    params.quantile = a.quantile.unwrap_or(params.quantile);
    params.k_remove = a.k_remove.or(params.k_remove);
    params.validate()?;
    let name = a.data.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    let mut csv = String::from("detector,attack,recall,precision,auc,max_score,flagged_count,auc_vs_base\n");
    let fmt = |v: Option<f64>| v.map(poisonlab::numfmt::fmt_f64).unwrap_or_default();
    for kind in DetectorKind::ALL {
        let r = stealth_row(kind, &name, &base, &data, &params)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            kind.label(),
            r.attack,
            fmt(Some(r.recall)),
            fmt(Some(r.precision)),
            fmt(r.auc),
            fmt(Some(r.max_score)),
            r.flagged_count,
            fmt(r.auc_vs_base),
        ));
    }
    let path = ctx.out_file("detection.csv")?;
    std::fs::write(&path, &csv).map_err(|e| LabError::io(&path, e))?;
    print!("{csv}");
    Ok(())
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let data = TransitionDataset::read(&a.data)?;
    let model = VictimModel::read(&a.model)?;
    let episodes = a
        .episodes
        .or(ctx.config.as_ref().map(|c| c.n_eval_episodes))
        .unwrap_or(1000);
    let env = Environment::new(data.spec.clone())?;
    let seed = ctx.seed();
    let r = evaluate_policy(&env, &model, episodes, evaluation_seed(seed))?;
    print_json(&json!({
        "mean": poisonlab::numfmt::fmt_f64(r.mean),
        "se": r.se.map(poisonlab::numfmt::fmt_f64),
        "n_episodes": r.n_episodes,
        "seed": seed,
    }));
    Ok(())
}

fn run(ctx: &Ctx) -> Result<()> {
    let mut cfg = ctx
        .config
        .clone()
        .ok_or_else(|| LabError::config("config", "`run` needs --config <path>"))?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let report = run_experiment(&cfg)?;
    let files = emit_report(&report, &ctx.out, &ctx.formats)?;
    let hierarchy: Vec<_> = report
        .hierarchy
        .iter()
        .map(|h| json!({ "victim": h.victim, "config": h.config, "passed": h.passed }))
        .collect();
    print_json(&json!({
        "files": files,
        "rows": report.rows.len(),
        "failures": report.failures(),
        "audits_passed": report.all_audits_pass(),
        "hierarchy": hierarchy,
    }));
    Ok(())
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| LabError::io(&a.input, e))?;
    let report = from_json(&text)?;
    let files = emit_report(&report, &ctx.out, &ctx.formats)?;
    print_json(&json!({ "files": files }));
    Ok(())
}

fn out_dir(cli_out: Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli_out
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os("POISONLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").to_path_buf())
}

fn execute(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let formats = ReportFormat::parse_list(cli.format.as_deref().unwrap_or("all"))?;
    let ctx = Ctx {
        seed: cli.seed,
        out: out_dir(cli.out, config.as_ref()),
        config,
        formats,
    };
    match &cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Run => run(&ctx),
        Command::Report(a) => report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
