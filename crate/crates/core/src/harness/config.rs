use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{matched_budget, matched_noise_bound, AttackConfig, Strategy, Support};
use crate::defense::{DetectorKind, DetectorParams};
use crate::envlab::{BehaviorQuality, EnvKind, MdpSpec};
use crate::error::{LabError, Result};
use crate::sensitivity::Surface;
use crate::victims::{AlgoTag, FeatureKind, FeatureMap, TrainConfig};

/// The seven benchmark `(rho, epsilon)` pairs.
pub const TABLE_GRID: [(f64, f64); 7] = [
    (0.01, 0.5),
    (0.015, 0.33),
    (0.02, 0.25),
    (0.025, 0.2),
    (0.033, 0.15),
    (0.05, 0.1),
    (0.1, 0.05),
];

/// Label of the full-support noise attack used for the stealth comparison.
pub const NOISE_FULL_LABEL: &str = "RandomNoise(rho=1)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// Budgets measured after dividing each column by its robust std.
    RobustStd,
    Raw,
}

impl Units {
    pub fn describe(self) -> &'static str {
        match self {
            Units::RobustStd => "epsilon and c_total in per-column robust-std units (1.4826 * MAD, std fallback)",
            Units::Raw => "epsilon and c_total in raw environment units",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

impl EnvConfig {
    pub fn spec(&self, seed: u64) -> Result<MdpSpec> {
        let mut spec = match self.kind {
            EnvKind::GridWorld => MdpSpec::grid_world(self.grid_size.unwrap_or(5), seed),
            EnvKind::LineWorld => MdpSpec::line_world(seed),
        };
        if let Some(v) = self.noise_std {
            spec.noise_std = v;
        }
        if let Some(v) = self.gamma {
            spec.gamma = v;
        }
        if let Some(v) = self.horizon {
            spec.horizon = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub quality: BehaviorQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    pub algo: AlgoTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl VictimConfig {
    pub fn label(&self, env: EnvKind) -> String {
        let env = match env {
            EnvKind::GridWorld => "GridWorld",
            EnvKind::LineWorld => "LineWorld",
        };
        let algo = match self.algo {
            AlgoTag::TabQ => "TabQ",
            AlgoTag::LinFQI => "LinFQI",
            AlgoTag::ConsLinFQI => "ConsLinFQI",
        };
        format!("{env}+{algo}")
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| default_train_config(self.algo))
    }

    pub fn feature_map(&self, spec: &MdpSpec) -> Result<FeatureMap> {
        match &self.features {
            Some(kind) => FeatureMap::new(kind.clone(), spec.state_bounds(), spec.n_actions),
            None => FeatureMap::default_for(spec),
        }
    }
}

pub fn default_train_config(algo: AlgoTag) -> TrainConfig {
    match algo {
        AlgoTag::TabQ => TrainConfig::tabular_default(),
        AlgoTag::LinFQI => TrainConfig::fqi_default(),
        AlgoTag::ConsLinFQI => TrainConfig {
            conservative_beta: 0.1,
            ..TrainConfig::fqi_default()
        },
    }
}

/// Budget-matched sweep over `(rho, epsilon)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub configs: Vec<(f64, f64)>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    pub surface: Surface,
    #[serde(default = "support_all")]
    pub support: Support,
    /// Also run budget-matched RandomNoise with rho = 1.
    #[serde(default)]
    pub noise_full: bool,
    #[serde(default)]
    pub seed: u64,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn support_all() -> Support {
    Support::All
}

/// An explicit attack with the label it carries in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub label: String,
    #[serde(default = "custom_group")]
    pub group: String,
    pub attack: AttackConfig,
}

fn custom_group() -> String {
    "custom".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorsConfig {
    #[serde(default = "all_detectors")]
    pub kinds: Vec<DetectorKind>,
    #[serde(default, flatten)]
    pub params: DetectorParams,
}

fn all_detectors() -> Vec<DetectorKind> {
    DetectorKind::ALL.to_vec()
}

impl Default for DetectorsConfig {
    fn default() -> Self {
        Self {
            kinds: all_detectors(),
            params: DetectorParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "five")]
    pub n_seeds: usize,
    pub n_eval_episodes: usize,
    #[serde(default = "robust_units")]
    pub units: Units,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub victims: Vec<VictimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<NamedAttack>,
    #[serde(default)]
    pub detectors: DetectorsConfig,
    /// Not part of the report; overridden by `--out` and `POISONLAB_OUT`.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

fn five() -> usize {
    5
}

fn robust_units() -> Units {
    Units::RobustStd
}

/// One attack of the expanded grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub label: String,
    /// Config column of the report, e.g. `(0.01, 0.5)`.
    pub group: String,
    pub attack: AttackConfig,
    /// Energy every attack of the group is matched to.
    pub matched_energy: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::parse("experiment config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// The default desk benchmark for one environment: LineWorld + LinFQI on the
    /// reward and state surface, or GridWorld + TabQ on rewards.
    pub fn default_benchmark(kind: EnvKind) -> Self {
        let (env, victim, surface) = match kind {
            EnvKind::LineWorld => (
                EnvConfig { kind, grid_size: None, noise_std: None, gamma: None, horizon: None },
                AlgoTag::LinFQI,
                Surface::Both,
            ),
            EnvKind::GridWorld => (
                EnvConfig { kind, grid_size: Some(5), noise_std: Some(0.1), gamma: None, horizon: None },
                AlgoTag::TabQ,
                Surface::Reward,
            ),
        };
        Self {
            seed: 0,
            n_seeds: 5,
            n_eval_episodes: 1000,
            units: Units::RobustStd,
            env,
            dataset: DatasetConfig { size: 20_000, quality: BehaviorQuality::Medium },
            victims: vec![VictimConfig { algo: victim, features: None, train: None }],
            grid: Some(GridConfig {
                configs: TABLE_GRID.to_vec(),
                strategies: all_strategies(),
                surface,
                support: Support::All,
                noise_full: kind == EnvKind::LineWorld,
                seed: 0,
            }),
            attacks: Vec::new(),
            detectors: DetectorsConfig::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(LabError::config("n_seeds", "must be at least 1"));
        }
        if self.n_eval_episodes == 0 {
            return Err(LabError::config("n_eval_episodes", "must be at least 1"));
        }
        if self.dataset.size == 0 {
            return Err(LabError::config("dataset.size", "must be at least 1"));
        }
        if self.victims.is_empty() {
            return Err(LabError::config("victims", "at least one victim is required"));
        }
        let spec = self.env.spec(self.seed)?;
        for v in &self.victims {
            v.train_config().validate()?;
            v.feature_map(&spec)?;
        }
        if let Some(g) = &self.grid {
            for (rho, eps) in &g.configs {
                if !(*rho > 0.0 && *rho <= 1.0) {
                    return Err(LabError::config("grid.configs", format!("rho {rho} outside (0, 1]")));
                }
                if !(*eps >= 0.0 && eps.is_finite()) {
                    return Err(LabError::config("grid.configs", format!("epsilon {eps} must be >= 0")));
                }
            }
        }
        let attacks = self.attack_grid()?;
        if attacks.is_empty() {
            return Err(LabError::config("attack_grid", "no attacks configured"));
        }
        for a in &attacks {
            a.attack.validate()?;
        }
        self.detectors.params.validate()
    }

    /// Expands the budget-matched grid and appends explicit attacks.
    pub fn attack_grid(&self) -> Result<Vec<AttackSpec>> {
        let mut out = Vec::new();
        if let Some(g) = &self.grid {
            let n = self.dataset.size;
            let state_dim = self.env.spec(self.seed)?.state_dim;
            let dims = usize::from(g.surface.includes_reward())
                + if g.surface.includes_state() { state_dim } else { 0 };
            for &(rho, eps) in &g.configs {
                let group = format!("({rho}, {eps})");
                let energy = matched_budget(rho, n, eps);
                let base = AttackConfig {
                    strategy: Strategy::RandomNoise,
                    rho,
                    epsilon_local: None,
                    c_total: None,
                    surface: g.surface,
                    support: Support::All,
                    seed: g.seed,
                };
                for &strategy in &g.strategies {
                    let attack = match strategy {
                        Strategy::RandomNoise => AttackConfig {
                            epsilon_local: Some(matched_noise_bound(eps, dims)),
                            ..base.clone()
                        },
                        Strategy::RandomSubset | Strategy::LocalGreedy => AttackConfig {
                            strategy,
                            epsilon_local: Some(eps),
                            ..base.clone()
                        },
                        Strategy::GlobalAllocation => AttackConfig {
                            strategy,
                            c_total: Some(energy),
                            support: g.support,
                            ..base.clone()
                        },
                    };
                    out.push(AttackSpec {
                        label: strategy.label().into(),
                        group: group.clone(),
                        attack,
                        matched_energy: Some(energy),
                    });
                }
                if g.noise_full {
                    // Same expected energy spread over every transition.
                    let per_sample = (energy / n as f64).sqrt();
                    out.push(AttackSpec {
                        label: NOISE_FULL_LABEL.into(),
                        group: group.clone(),
                        attack: AttackConfig {
                            rho: 1.0,
                            epsilon_local: Some(matched_noise_bound(per_sample, dims)),
                            ..base.clone()
                        },
                        matched_energy: Some(energy),
                    });
                }
            }
        }
        for a in &self.attacks {
            out.push(AttackSpec {
                label: a.label.clone(),
                group: a.group.clone(),
                attack: a.attack.clone(),
                matched_energy: None,
            });
        }
        Ok(out)
    }
}
