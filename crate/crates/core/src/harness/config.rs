use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::AttackConfig;
use crate::defense::QueryPolicy;
use crate::error::{Error, Result};
use crate::net::TrainConfig;
use crate::rng;

/// Where the experiment's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// How member training sets are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SplitSpec {
    /// Disjoint `part_size` subsets, one per member.
    Partitioned {
        part_size: usize,
        validation_size: usize,
    },
    /// Every member trains on everything outside the validation set.
    Shared { validation_size: usize },
}

impl SplitSpec {
    pub fn validation_size(&self) -> usize {
        match *self {
            SplitSpec::Partitioned { validation_size, .. } | SplitSpec::Shared { validation_size } => {
                validation_size
            }
        }
    }
}

/// The defended variants evaluated besides the plain ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySettings {
    pub noise_sigma: f64,
    pub rv_alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifySettings {
    pub sigma: f64,
    pub n: usize,
    pub alpha: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub members: usize,
    /// Member `l` (1-based) trains at temperature `temperature_base · l`.
    pub temperature_base: f64,
    /// Hidden widths of the dense members; each hidden layer is followed by
    /// ReLU and dropout.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub policies: PolicySettings,
    pub attack: AttackConfig,
    pub samples: usize,
    /// Cap on targets per sample; `None` attacks every non-true label.
    pub targets_per_sample: Option<usize>,
    pub superimpose: Vec<usize>,
    pub bins: usize,
    pub certify: CertifySettings,
    pub out_dir: PathBuf,
    /// Root of every random stream. The `seed` fields inside `train` and
    /// `attack` are overwritten from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Blobs {
                classes: 10,
                per_class: 60,
                dim: 128,
                spread: 0.3,
            },
            split: SplitSpec::Partitioned {
                part_size: 100,
                validation_size: 100,
            },
            members: 3,
            temperature_base: 10.0,
            hidden: vec![32],
            train: TrainConfig {
                learning_rate: 0.1,
                dropout_keep: 1.0,
                batch_size: 16,
                epochs: 150,
                ..TrainConfig::default()
            },
            policies: PolicySettings {
                noise_sigma: 0.1,
                rv_alpha: 0.05,
            },
            attack: AttackConfig {
                iterations: 100,
                c_search_steps: 6,
                step_size: 0.05,
                ..AttackConfig::default()
            },
            samples: 5,
            targets_per_sample: None,
            superimpose: vec![2, 3],
            bins: 40,
            certify: CertifySettings {
                sigma: 0.25,
                n: 500,
                alpha: 0.05,
                samples: 5,
            },
            out_dir: PathBuf::from("certvote-out"),
            seed: 0,
        }
    }
}

/// The seeds every stage actually uses, all derived from the root seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeedPlan {
    pub root: u64,
    pub dataset: u64,
    pub partition: u64,
    pub member_init: Vec<u64>,
    pub member_train: Vec<u64>,
    pub attack: u64,
    pub policy: u64,
    pub certify: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.members == 0 {
            return bad("members must be at least 1");
        }
        if self.bins == 0 {
            return bad("bins must be at least 1");
        }
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if !(self.temperature_base > 0.0) {
            return bad("temperature_base must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.superimpose.contains(&0) {
            return bad("superimposition sizes must be at least 1");
        }
        if self.targets_per_sample == Some(0) {
            return bad("targets_per_sample must be at least 1");
        }
        match self.dataset {
            DatasetSpec::Blobs { classes, per_class, dim, spread } => {
                if classes < 2 || per_class == 0 || dim < 2 || !(spread >= 0.0) {
                    return bad("blobs need classes >= 2, per_class >= 1, dim >= 2, spread >= 0");
                }
            }
            DatasetSpec::Idx { limit, .. } => {
                if limit == Some(0) {
                    return bad("idx limit must be positive");
                }
            }
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.train.validate().map_err(wrap)?;
        self.attack.validate().map_err(wrap)?;
        self.plain_policy().validate().map_err(wrap)?;
        self.noisy_policy().validate().map_err(wrap)?;
        self.rank_policy().validate().map_err(wrap)?;
        if !(self.certify.sigma > 0.0 && self.certify.n > 0 && self.certify.alpha > 0.0 && self.certify.alpha < 1.0) {
            return bad("certify needs sigma > 0, n >= 1 and 0 < alpha < 1");
        }
        Ok(())
    }

    pub fn temperatures(&self) -> Vec<f64> {
        (1..=self.members).map(|l| self.temperature_base * l as f64).collect()
    }

    pub fn seeds(&self) -> SeedPlan {
        let r = self.seed;
        SeedPlan {
            root: r,
            dataset: rng::derive_seed(r, "dataset", 0),
            partition: rng::derive_seed(r, "partition", 0),
            member_init: (0..self.members as u64).map(|l| rng::derive_seed(r, "member-init", l)).collect(),
            member_train: (0..self.members as u64).map(|l| rng::derive_seed(r, "member-train", l)).collect(),
            attack: rng::derive_seed(r, "attack", 0),
            policy: rng::derive_seed(r, "policy", 0),
            certify: rng::derive_seed(r, "certify", 0),
        }
    }

    pub fn plain_policy(&self) -> QueryPolicy {
        QueryPolicy::plain()
    }

    pub fn noisy_policy(&self) -> QueryPolicy {
        QueryPolicy::noisy(self.policies.noise_sigma, self.seeds().policy)
    }

    pub fn rank_policy(&self) -> QueryPolicy {
        self.noisy_policy().with_rank_verification(self.policies.rv_alpha)
    }

    /// Parse a JSON object or `key = value` lines. Missing keys keep their
    /// defaults; dotted keys address nested fields.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut base = serde_json::to_value(ExperimentConfig::default())?;
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let user: Value =
                serde_json::from_str(trimmed).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
            merge(&mut base, user);
        } else {
            for (no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
                set_path(&mut base, key.trim(), parse_scalar(value.trim()))?;
            }
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_text(&text)
    }

    /// Apply one `key=value` override on top of an existing configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        set_path(&mut v, key, parse_scalar(value))?;
        let next: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config("empty key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        assert_eq!(ExperimentConfig::default().bins, 40);
    }

    #[test]
    fn temperatures_follow_rule() {
        let cfg = ExperimentConfig { members: 3, ..Default::default() };
        assert_eq!(cfg.temperatures(), vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn key_value_text() {
        let cfg = ExperimentConfig::from_text(
            "# smoke\nmembers = 4\ntrain.epochs=3\ndataset.dim = 8\nout_dir = runs/a\nseed=9\n",
        )
        .unwrap();
        assert_eq!(cfg.members, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/a"));
        assert!(matches!(cfg.dataset, DatasetSpec::Blobs { dim: 8, .. }));
        assert_eq!(cfg.train.learning_rate, ExperimentConfig::default().train.learning_rate);
    }

    #[test]
    fn json_text_merges_onto_defaults() {
        let cfg = ExperimentConfig::from_text(r#"{"members": 5, "split": {"mode": "shared", "validation_size": 40}}"#)
            .unwrap();
        assert_eq!(cfg.members, 5);
        assert_eq!(cfg.split, SplitSpec::Shared { validation_size: 40 });
        assert_eq!(cfg.bins, 40);
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["members = 0", "bins = 0", "nonsense line", "members = many", "train.momentum = 1.5"] {
            assert!(matches!(ExperimentConfig::from_text(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seeds_depend_only_on_root() {
        let a = ExperimentConfig { seed: 4, ..Default::default() };
        let mut b = a.clone();
        b.train.seed = 99;
        assert_eq!(a.seeds(), b.seeds());
        assert_ne!(a.seeds(), ExperimentConfig { seed: 5, ..Default::default() }.seeds());
    }

    #[test]
    fn override_one_key() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("policies.noise_sigma", "0.3").unwrap();
        assert_eq!(cfg.policies.noise_sigma, 0.3);
        assert!(cfg.set("members", "0").is_err());
        assert_eq!(cfg.members, 3);
    }
}
