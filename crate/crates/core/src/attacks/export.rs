use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttackConfig, AttackStatus, FieldScales, Perturbation, PoisonedDataset};
use crate::error::{LabError, Result};
use crate::numfmt::{fmt_f64, fmt_vec};

/// Everything in a [`PoisonedDataset`] except the perturbation map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub record: String,
    pub config: AttackConfig,
    pub base_fingerprint: u64,
    pub base_len: usize,
    pub scales: FieldScales,
    pub total_l2_energy: f64,
    pub budgeted_energy: f64,
    pub clipping_loss: f64,
    pub n_poisoned: usize,
    pub zero_gradient_count: usize,
    pub attack_objective: f64,
    pub status: AttackStatus,
}

#[derive(Deserialize)]
struct Record {
    idx: usize,
    d_r: f64,
    d_s: Vec<f64>,
    #[serde(default)]
    d_s_next: Vec<f64>,
}

impl PoisonedDataset {
    pub fn manifest(&self) -> AttackManifest {
        AttackManifest {
            record: "attack".into(),
            config: self.config.clone(),
            base_fingerprint: self.base_fingerprint,
            base_len: self.base_len,
            scales: self.scales.clone(),
            total_l2_energy: self.total_l2_energy,
            budgeted_energy: self.budgeted_energy,
            clipping_loss: self.clipping_loss(),
            n_poisoned: self.n_poisoned,
            zero_gradient_count: self.zero_gradient_count,
            attack_objective: self.attack_objective,
            status: self.status,
        }
    }

    /// Manifest line followed by one `{idx, d_r, d_s}` record per perturbation.
    pub fn to_ndjson(&self) -> String {
        let mut out = serde_json::to_string(&self.manifest()).expect("manifest serializes");
        out.push('\n');
        for (idx, p) in &self.perturbations {
            let _ = write!(
                out,
                "{{\"idx\":{idx},\"d_r\":{},\"d_s\":{}",
                fmt_f64(p.d_r),
                fmt_vec(&p.d_s)
            );
            if !p.d_s_next.is_empty() {
                let _ = write!(out, ",\"d_s_next\":{}", fmt_vec(&p.d_s_next));
            }
            out.push_str("}\n");
        }
        out
    }

    pub fn from_ndjson(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| LabError::parse("perturbations", "empty file"))?
            .map_err(|e| LabError::parse("perturbations", e))?;
        let m: AttackManifest =
            serde_json::from_str(&first).map_err(|e| LabError::parse("attack manifest", e))?;
        let mut perturbations = std::collections::BTreeMap::new();
        for line in lines {
            let line = line.map_err(|e| LabError::parse("perturbations", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record =
                serde_json::from_str(&line).map_err(|e| LabError::parse("perturbation record", e))?;
            if r.idx >= m.base_len {
                return Err(LabError::Data {
                    idx: r.idx,
                    reason: format!("beyond base length {}", m.base_len),
                });
            }
            perturbations.insert(
                r.idx,
                Perturbation {
                    d_r: r.d_r,
                    d_s: r.d_s,
                    d_s_next: r.d_s_next,
                },
            );
        }
        Ok(Self {
            config: m.config,
            base_fingerprint: m.base_fingerprint,
            base_len: m.base_len,
            scales: m.scales,
            perturbations,
            total_l2_energy: m.total_l2_energy,
            budgeted_energy: m.budgeted_energy,
            n_poisoned: m.n_poisoned,
            zero_gradient_count: m.zero_gradient_count,
            attack_objective: m.attack_objective,
            status: m.status,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ndjson()).map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
        Self::from_ndjson(std::io::BufReader::new(f))
    }
}
