//! Experiment configuration: a TOML file with one section per component.
//!
//! Parsing is strict (unknown keys are errors). Every default is filled in by
//! [`ExperimentConfig::resolve`], so [`ExperimentConfig::to_toml`] echoes a
//! file that reproduces the run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregatorConfig, KrumDistance};
use crate::attacks::{AdaptiveKrumParams, AttackConfig};
use crate::backdoor::TriggerConfig;
use crate::csft::CsftConfig;
use crate::data::SyntheticSpec;
use crate::error::{FlError, Result};
use crate::model::{Activation, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "d_classes")]
        num_classes: usize,
        #[serde(default = "d_dim")]
        dim: usize,
        #[serde(default = "d_per_class")]
        per_class: usize,
        #[serde(default = "d_spread")]
        spread: f64,
        /// Fraction of generated samples held out for evaluation.
        #[serde(default = "d_validation")]
        validation_fraction: f64,
    },
    /// IDX image/label files (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `limit` training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

fn d_classes() -> usize {
    10
}
fn d_dim() -> usize {
    64
}
fn d_per_class() -> usize {
    250
}
fn d_spread() -> f64 {
    0.15
}
fn d_validation() -> f64 {
    0.2
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            num_classes: d_classes(),
            dim: d_dim(),
            per_class: d_per_class(),
            spread: d_spread(),
            validation_fraction: d_validation(),
        }
    }
}

impl DataSource {
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            DataSource::Synthetic {
                num_classes,
                dim,
                per_class,
                spread,
                ..
            } => Some(SyntheticSpec {
                num_classes,
                dim,
                per_class,
                spread,
            }),
            DataSource::Idx { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default)]
    pub partition: PartitionKind,
    #[serde(default = "d_alpha")]
    pub dirichlet_alpha: f64,
    /// Share of the training data reserved for the aggregator's fine-tuning set.
    #[serde(default = "d_ft")]
    pub finetune_fraction: f64,
}

fn d_alpha() -> f64 {
    0.5
}
fn d_ft() -> f64 {
    0.04
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            partition: PartitionKind::Iid,
            dirichlet_alpha: d_alpha(),
            finetune_fraction: d_ft(),
        }
    }
}

/// Hidden architecture; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn d_hidden() -> Vec<usize> {
    vec![64, 32]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: d_hidden(),
            activation: Activation::Relu,
        }
    }
}

/// Client training hyperparameters. Shuffle seeds are derived per round and
/// client from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
            seed,
        }
    }
}

fn d_benign_train() -> TrainSection {
    TrainSection {
        learning_rate: 0.1,
        local_epochs: 1,
        batch_size: 32,
        grad_clip: None,
    }
}

fn d_malicious_train() -> TrainSection {
    TrainSection {
        local_epochs: 3,
        ..d_benign_train()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Total clients.
    #[serde(default = "d_n")]
    pub n: usize,
    /// Malicious clients (the last `m` client ids).
    #[serde(default = "d_m")]
    pub m: usize,
    /// Clients sampled per round; defaults to `n`.
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default = "d_rounds")]
    pub total_rounds: usize,
    /// Share of each malicious client's shard that is triggered and relabeled.
    #[serde(default = "d_poison")]
    pub poison_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default = "d_aggregator")]
    pub aggregator: AggregatorConfig,
    #[serde(default = "d_attack")]
    pub attack: AttackConfig,
    #[serde(default = "d_benign_train")]
    pub benign_train: TrainSection,
    #[serde(default = "d_malicious_train")]
    pub malicious_train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csft: Option<CsftConfig>,
}

fn d_n() -> usize {
    20
}
fn d_m() -> usize {
    1
}
fn d_rounds() -> usize {
    30
}
fn d_poison() -> f64 {
    0.5
}
fn d_aggregator() -> AggregatorConfig {
    AggregatorConfig::Krum {
        m_assumed: None,
        distance: KrumDistance::Squared,
    }
}
fn d_attack() -> AttackConfig {
    AttackConfig::adaptive_krum(AdaptiveKrumParams::default())
}

impl ExperimentConfig {
    /// All defaults with the given seed.
    pub fn with_seed(master_seed: u64) -> Self {
        let mut cfg = Self {
            master_seed,
            n: d_n(),
            m: d_m(),
            s: None,
            total_rounds: d_rounds(),
            poison_fraction: d_poison(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            trigger: TriggerConfig::default(),
            aggregator: d_aggregator(),
            attack: d_attack(),
            benign_train: d_benign_train(),
            malicious_train: d_malicious_train(),
            csft: None,
        };
        cfg.resolve();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| FlError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlError::Config(format!("cannot serialize config: {e}")))
    }

    /// Fill defaults that depend on other fields.
    pub fn resolve(&mut self) {
        if self.s.is_none() {
            self.s = Some(self.n);
        }
        if let AggregatorConfig::Krum { m_assumed, .. } = &mut self.aggregator {
            if m_assumed.is_none() {
                *m_assumed = Some(self.m);
            }
        }
        self.attack.resolve(&self.aggregator);
    }

    /// Clients per round.
    pub fn round_size(&self) -> usize {
        self.s.unwrap_or(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.master_seed > i64::MAX as u64 {
            return Err(FlError::Config(format!(
                "master_seed must be <= {} to round-trip through TOML",
                i64::MAX
            )));
        }
        if self.n == 0 {
            return Err(FlError::Config("n must be >= 1".into()));
        }
        if 2 * self.m >= self.n {
            return Err(FlError::Config(format!(
                "malicious clients must be a minority: m = {} needs m < n/2 with n = {}",
                self.m, self.n
            )));
        }
        let s = self.round_size();
        if s == 0 || s > self.n {
            return Err(FlError::Config(format!("s must be in [1, n], got s = {s}, n = {}", self.n)));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(FlError::Config(format!(
                "poison_fraction must be in (0, 1], got {}",
                self.poison_fraction
            )));
        }
        self.aggregator.validate(Some(s))?;
        self.attack.validate(&self.aggregator)?;
        for (name, t) in [("benign_train", &self.benign_train), ("malicious_train", &self.malicious_train)] {
            t.to_train_config(0)
                .validate()
                .map_err(|e| FlError::Config(format!("{name}: {e}")))?;
        }
        if let Some(c) = &self.csft {
            c.validate()?;
            if self.data.finetune_fraction == 0.0 {
                return Err(FlError::Config("csft needs data.finetune_fraction > 0".into()));
            }
        }
        if !(0.0..1.0).contains(&self.data.finetune_fraction) {
            return Err(FlError::Config(format!(
                "finetune_fraction must be in [0, 1), got {}",
                self.data.finetune_fraction
            )));
        }
        if let DataSource::Synthetic {
            num_classes,
            validation_fraction,
            ..
        } = self.data.source
        {
            if self.trigger.target_label >= num_classes {
                return Err(FlError::Config(format!(
                    "trigger target_label {} outside {num_classes} classes",
                    self.trigger.target_label
                )));
            }
            if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
                return Err(FlError::Config("validation_fraction must be in (0, 1)".into()));
            }
        }
        if self.data.partition == PartitionKind::Dirichlet && !(self.data.dirichlet_alpha > 0.0) {
            return Err(FlError::Config("dirichlet_alpha must be > 0".into()));
        }
        if matches!(self.attack, AttackConfig::Dba) && self.m > 0 {
            let side = self.trigger.patch_size;
            if side * side < self.m {
                return Err(FlError::Config(format!(
                    "dba: a {side}x{side} trigger cannot be split across {} clients",
                    self.m
                )));
            }
        }
        Ok(())
    }
}

/// Read, resolve and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| FlError::io(path, e))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        FlError::Parse { message, .. } => FlError::Parse {
            path: path.to_path_buf(),
            message,
        },
        FlError::Config(msg) => FlError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let cfg = ExperimentConfig::from_toml("master_seed = 7").unwrap();
        assert_eq!(cfg.n, 20);
        assert_eq!(cfg.round_size(), 20);
        assert_eq!(cfg.m, 1);
        assert_eq!(cfg.aggregator, AggregatorConfig::krum(1));
        assert_eq!(cfg, ExperimentConfig::with_seed(7));
    }

    #[test]
    fn krum_constraint_is_reported() {
        let err = ExperimentConfig::from_toml("master_seed = 1\nn = 20\nm = 9\n[aggregator]\nrule = \"krum\"")
            .unwrap_err()
            .to_string();
        assert!(err.contains("2m+2 < n"), "{err}");
        let err = ExperimentConfig::from_toml("master_seed = 1\nn = 20\nm = 10\n[aggregator]\nrule = \"krum\"")
            .unwrap_err()
            .to_string();
        assert!(err.contains("minority"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "master_seed = 1\nrounds = 3",
            "master_seed = 1\n[csft]\nlr_maxx = 0.1",
            "master_seed = 1\n[data.source]\nkind = \"synthetic\"\ndims = 3",
            "master_seed = 1\n[benign_train]\nlearning_rate = 0.1\nlocal_epochs = 1\nbatch_size = 4\nseed = 3",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
        assert!(ExperimentConfig::from_toml("master_seed = ").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let text = r#"
master_seed = 11
m = 2
total_rounds = 5
[aggregator]
rule = "robust_mom"
k_repeats = 3
[attack]
kind = "adaptive_mom"
scale_factor = 10.0
[csft]
grad_clip = 1.0
total_epochs = 20
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let echoed = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&echoed).unwrap(), cfg);
    }

    #[test]
    fn attack_threshold_from_norm_bound() {
        let cfg = ExperimentConfig::from_toml(
            "master_seed = 1\n[aggregator]\nrule = \"norm_bound\"\nthreshold = 0.5\n[attack]\nkind = \"adaptive_norm\"",
        )
        .unwrap();
        assert_eq!(cfg.attack, AttackConfig::AdaptiveNorm { threshold: Some(0.5) });
        assert!(ExperimentConfig::from_toml("master_seed = 1\n[aggregator]\nrule = \"fed_avg\"\n[attack]\nkind = \"adaptive_norm\"").is_err());
    }

    #[test]
    fn parse_config_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.toml");
        assert!(matches!(parse_config(&missing), Err(FlError::Io { .. })));
        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "master_seed = [").unwrap();
        let err = parse_config(&bad).unwrap_err().to_string();
        assert!(err.contains("bad.toml"), "{err}");
    }
}
