use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AlgoTag, FeatureMap, VictimModel};
use crate::error::{LabError, Result};
use crate::numfmt::fmt_vec;

#[derive(Serialize, Deserialize)]
struct Header {
    record: String,
    algo_tag: AlgoTag,
    feature_map: FeatureMap,
    gamma: f64,
    dim: usize,
    train_log: Vec<f64>,
}

#[derive(Deserialize)]
struct Weights {
    theta: Vec<f64>,
}

impl VictimModel {
    /// Two lines: a JSON header, then `{"theta":[...]}` with 17-digit numbers.
    pub fn to_checkpoint(&self) -> String {
        let header = Header {
            record: "model".into(),
            algo_tag: self.algo_tag,
            feature_map: self.feature_map.clone(),
            gamma: self.gamma,
            dim: self.theta.len(),
            train_log: self.train_log.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        let _ = writeln!(out);
        let _ = writeln!(out, "{{\"theta\":{}}}", fmt_vec(&self.theta));
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines.next().ok_or_else(|| LabError::parse("checkpoint", "empty file"))?,
        )
        .map_err(|e| LabError::parse("checkpoint header", e))?;
        if header.record != "model" {
            return Err(LabError::parse("checkpoint header", "not a model record"));
        }
        let weights: Weights = serde_json::from_str(
            lines.next().ok_or_else(|| LabError::parse("checkpoint", "missing theta"))?,
        )
        .map_err(|e| LabError::parse("checkpoint theta", e))?;
        let feature_map = header.feature_map.rebuilt()?;
        if weights.theta.len() != header.dim || header.dim != feature_map.dim {
            return Err(LabError::parse("checkpoint", "theta length disagrees with the feature map"));
        }
        Ok(Self {
            feature_map,
            theta: weights.theta,
            gamma: header.gamma,
            algo_tag: header.algo_tag,
            train_log: header.train_log,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}
