use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{Environment, Policy};
use super::oracle::value_iteration_oracle;
use super::MdpSpec;
use crate::error::{LabError, Result};
use crate::numfmt::{fmt_f64, fmt_vec};

/// Exploration rate of the "medium" behavior policy.
pub const MEDIUM_EPSILON: f64 = 0.4;
/// Discretization used when the behavior policy needs a LineWorld oracle.
pub const BEHAVIOR_ORACLE_RESOLUTION: usize = 201;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub idx: usize,
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
    #[serde(default)]
    pub poisoned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorQuality {
    Random,
    Medium,
    Expert,
}

impl BehaviorQuality {
    pub fn tag(self) -> &'static str {
        match self {
            BehaviorQuality::Random => "random",
            BehaviorQuality::Medium => "medium",
            BehaviorQuality::Expert => "expert",
        }
    }

    /// Probability of taking a uniformly random action instead of the oracle's.
    pub fn exploration(self) -> f64 {
        match self {
            BehaviorQuality::Random => 1.0,
            BehaviorQuality::Medium => MEDIUM_EPSILON,
            BehaviorQuality::Expert => 0.0,
        }
    }
}

impl std::str::FromStr for BehaviorQuality {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "medium" => Ok(Self::Medium),
            "expert" => Ok(Self::Expert),
            other => Err(LabError::config("quality", format!("unknown quality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub spec: MdpSpec,
    pub transitions: Vec<Transition>,
    pub behavior_tag: String,
    pub generation_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    record: String,
    spec: MdpSpec,
    behavior_tag: String,
    generation_seed: u64,
    n_transitions: usize,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.transitions.is_empty() {
            return Err(LabError::InsufficientData { needed: 1, got: 0 });
        }
        let d = self.spec.state_dim;
        for (pos, t) in self.transitions.iter().enumerate() {
            if t.idx != pos {
                return Err(LabError::Data {
                    idx: t.idx,
                    reason: format!("expected dense idx {pos}"),
                });
            }
            if t.s.len() != d || t.s_next.len() != d {
                return Err(LabError::Data {
                    idx: t.idx,
                    reason: format!("state length differs from state_dim {d}"),
                });
            }
            if t.a >= self.spec.n_actions {
                return Err(LabError::Data {
                    idx: t.idx,
                    reason: format!("action {} out of range", t.a),
                });
            }
            if !t.r.is_finite() || t.s.iter().chain(&t.s_next).any(|x| !x.is_finite()) {
                return Err(LabError::Data {
                    idx: t.idx,
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint of the transition contents (FNV-1a over the bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.transitions {
            eat(t.idx as u64);
            t.s.iter().for_each(|x| eat(x.to_bits()));
            eat(t.a as u64);
            eat(t.r.to_bits());
            t.s_next.iter().for_each(|x| eat(x.to_bits()));
            eat(u64::from(t.terminal));
        }
        h
    }

    /// Newline-delimited JSON: a header record followed by one object per transition.
    pub fn to_ndjson(&self) -> String {
        let header = Header {
            record: "header".into(),
            spec: self.spec.clone(),
            behavior_tag: self.behavior_tag.clone(),
            generation_seed: self.generation_seed,
            n_transitions: self.transitions.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for t in &self.transitions {
            let _ = writeln!(
                out,
                "{{\"idx\":{},\"s\":{},\"a\":{},\"r\":{},\"s_next\":{},\"terminal\":{},\"poisoned\":{}}}",
                t.idx,
                fmt_vec(&t.s),
                t.a,
                fmt_f64(t.r),
                fmt_vec(&t.s_next),
                t.terminal,
                t.poisoned
            );
        }
        out
    }

    pub fn from_ndjson(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| LabError::parse("dataset", "empty file"))?
            .map_err(|e| LabError::parse("dataset", e))?;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| LabError::parse("dataset header", e))?;
        if header.record != "header" {
            return Err(LabError::parse("dataset header", "first record is not a header"));
        }
        let mut transitions = Vec::with_capacity(header.n_transitions);
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| LabError::parse("dataset", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line)
                .map_err(|e| LabError::parse(format!("dataset line {}", lineno + 2), e))?;
            transitions.push(t);
        }
        let data = Self {
            spec: header.spec,
            transitions,
            behavior_tag: header.behavior_tag,
            generation_seed: header.generation_seed,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        f.write_all(self.to_ndjson().as_bytes())
            .map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
        Self::from_ndjson(std::io::BufReader::new(f))
    }
}

/// Rolls out the behavior policy until exactly `n_transitions` are collected.
///
/// `random` acts uniformly, `expert` is greedy on the exact optimal Q, and `medium`
/// is epsilon-greedy around it with epsilon = 0.4. Episodes end on a terminal
/// transition or at the horizon (truncation is not marked terminal).
pub fn generate_dataset(
    env: &Environment,
    n_transitions: usize,
    quality: BehaviorQuality,
    seed: u64,
) -> Result<TransitionDataset> {
    if n_transitions == 0 {
        return Err(LabError::Argument("n_transitions must be at least 1".into()));
    }
    let oracle = match quality {
        BehaviorQuality::Random => None,
        _ => Some(value_iteration_oracle(env, BEHAVIOR_ORACLE_RESOLUTION, 1e-10)?),
    };
    let spec = env.spec();
    let explore = quality.exploration();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_transitions);
    'episodes: loop {
        let mut s = env.reset(&mut rng);
        for _ in 0..spec.horizon {
            let a = match &oracle {
                Some(opt) if explore == 0.0 || rng.gen::<f64>() >= explore => opt.act(&s),
                _ => rng.gen_range(0..spec.n_actions),
            };
            let out = env.step(&s, a, &mut rng);
            transitions.push(Transition {
                idx: transitions.len(),
                s: s.clone(),
                a,
                r: out.r,
                s_next: out.s_next.clone(),
                terminal: out.terminal,
                poisoned: false,
            });
            if transitions.len() == n_transitions {
                break 'episodes;
            }
            if out.terminal {
                break;
            }
            s = out.s_next;
        }
    }
    Ok(TransitionDataset {
        spec: spec.clone(),
        transitions,
        behavior_tag: quality.tag().to_string(),
        generation_seed: seed,
    })
}

/// Undiscounted returns of the complete episodes in a dataset (in order).
pub fn episode_returns(data: &TransitionDataset) -> Vec<f64> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut len = 0;
    for t in &data.transitions {
        acc += t.r;
        len += 1;
        if t.terminal || len == data.spec.horizon {
            out.push(acc);
            acc = 0.0;
            len = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_transition_count_and_dense_idx() {
        let env = Environment::new(MdpSpec::line_world(0)).unwrap();
        let d = generate_dataset(&env, 777, BehaviorQuality::Medium, 4).unwrap();
        assert_eq!(d.len(), 777);
        d.validate().unwrap();
        assert!(generate_dataset(&env, 0, BehaviorQuality::Random, 4).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let env = Environment::new(MdpSpec::grid_world(5, 0)).unwrap();
        let a = generate_dataset(&env, 2000, BehaviorQuality::Medium, 21).unwrap();
        let b = generate_dataset(&env, 2000, BehaviorQuality::Medium, 21).unwrap();
        assert_eq!(a.to_ndjson(), b.to_ndjson());
        let c = generate_dataset(&env, 2000, BehaviorQuality::Medium, 22).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn ndjson_round_trip_is_bit_exact() {
        let env = Environment::new(MdpSpec::line_world(0)).unwrap();
        let d = generate_dataset(&env, 500, BehaviorQuality::Random, 8).unwrap();
        let text = d.to_ndjson();
        let back = TransitionDataset::from_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.transitions.iter().zip(&d.transitions) {
            assert_eq!(a.s[0].to_bits(), b.s[0].to_bits());
            assert_eq!(a.s_next[0].to_bits(), b.s_next[0].to_bits());
        }
        assert_eq!(back.to_ndjson(), text);
    }

    #[test]
    fn rejects_garbage() {
        assert!(TransitionDataset::from_ndjson("".as_bytes()).is_err());
        assert!(TransitionDataset::from_ndjson("{\"record\":1}".as_bytes()).is_err());
    }
}
