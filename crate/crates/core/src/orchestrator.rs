//! The federated training loop, adversary hookup, post-training fine-tuning
//! and parameter sweeps.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{build_aggregator, AggregatorConfig, Aggregator, ClientUpdate};
use crate::attacks::{build_attack, malicious_local_updates, AdversaryOracle, Attack, AttackConfig, CraftInput, Crafted};
use crate::backdoor::{asr, poison_dataset, split_trigger_dba, TriggerSpec};
use crate::config::{DataSource, ExperimentConfig, PartitionKind};
use crate::csft::csft;
use crate::data::{gen_synthetic_with, load_idx, partition_dirichlet, partition_iid, Dataset};
use crate::error::{FlError, Result};
use crate::model::{Mlp, ModelSpec};
use crate::seed;
use crate::weights::WeightVector;

/// ASR above this marks an attack as successful.
pub const SUCCESS_THRESHOLD: f64 = 0.5;

/// Metrics after one aggregation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based round index.
    pub round: usize,
    pub accuracy: f64,
    pub asr: f64,
    /// Interpolation weight of the adaptive Krum attack, when one was crafted.
    pub alpha: Option<f64>,
    /// Empirical attack magnitude: distance between the mean benign update and
    /// the mean submitted malicious update. Absent without both kinds.
    pub delta: Option<f64>,
    pub krum_selected: Option<usize>,
    pub selected_is_malicious: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Aggregation rule, suffixed with `+` when fine-tuning follows training.
    pub defense: String,
    pub attack: String,
    pub m: usize,
    pub master_seed: u64,
    pub trace: Vec<EpochRecord>,
    pub final_train_acc: f64,
    pub final_train_asr: f64,
    pub train_attack_success: bool,
    pub ft_acc: Option<f64>,
    pub ft_asr: Option<f64>,
    /// `ft_acc - final_train_acc`.
    pub acc_diff: Option<f64>,
    pub ft_attack_success: Option<bool>,
    /// Share of Krum rounds with a malicious participant whose selected update
    /// was malicious.
    pub malicious_selected_fraction: Option<f64>,
}

/// Global model and carry-over between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Rounds completed so far.
    pub round: usize,
    pub weights: WeightVector,
    pub previous_benign_mean: Option<WeightVector>,
}

/// A prepared experiment: data split, shards poisoned, strategies built.
#[derive(Debug)]
pub struct Federation {
    cfg: ExperimentConfig,
    model: Mlp,
    trigger: TriggerSpec,
    /// Indexed by client id; malicious shards are already poisoned.
    shards: Vec<Dataset>,
    finetune: Dataset,
    validation: Dataset,
    malicious_ids: Vec<usize>,
    aggregator: Box<dyn Aggregator>,
    attack: Box<dyn Attack>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data.source {
        source @ DataSource::Synthetic {
            validation_fraction, ..
        } => {
            let spec = source.synthetic_spec().expect("synthetic");
            let all = gen_synthetic_with(seed::derive(cfg.master_seed, "data", &[]), &spec)?;
            all.split_holdout(*validation_fraction, seed::derive(cfg.master_seed, "split", &[]))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            if let Some(limit) = limit {
                train.samples.truncate(*limit);
            }
            let classes = train.num_classes.max(test.num_classes);
            train.num_classes = classes;
            test.num_classes = classes;
            if train.dim != test.dim {
                return Err(FlError::DimensionMismatch {
                    expected: train.dim,
                    got: test.dim,
                });
            }
            Ok((train, test))
        }
    }
}

impl Federation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.resolve();
        cfg.validate()?;
        let (train, validation) = load_data(&cfg)?;
        if cfg.trigger.target_label >= train.num_classes {
            return Err(FlError::Config(format!(
                "trigger target_label {} outside {} classes",
                cfg.trigger.target_label, train.num_classes
            )));
        }
        let model = Mlp::new(ModelSpec {
            input_dim: train.dim,
            hidden_dims: cfg.model.hidden_dims.clone(),
            num_classes: train.num_classes,
            activation: cfg.model.activation,
        })?;
        let trigger = cfg.trigger.resolve(train.dim, train.image_shape)?;

        let partition_seed = seed::derive(cfg.master_seed, "partition", &[]);
        let plan = match cfg.data.partition {
            PartitionKind::Iid => partition_iid(&train, cfg.n, cfg.data.finetune_fraction, partition_seed)?,
            PartitionKind::Dirichlet => partition_dirichlet(
                &train,
                cfg.n,
                cfg.data.dirichlet_alpha,
                cfg.data.finetune_fraction,
                partition_seed,
            )?,
        };
        let malicious_ids: Vec<usize> = (cfg.n - cfg.m..cfg.n).collect();
        let client_triggers = if matches!(cfg.attack, AttackConfig::Dba) && cfg.m > 0 {
            split_trigger_dba(&trigger, cfg.m)?
        } else {
            vec![trigger.clone(); cfg.m]
        };
        let mut shards = Vec::with_capacity(cfg.n);
        for (id, indices) in plan.client_indices.iter().enumerate() {
            let shard = train.subset(indices);
            if id >= cfg.n - cfg.m {
                if shard.is_empty() {
                    return Err(FlError::Input(format!("malicious client {id} received no samples")));
                }
                let t = &client_triggers[id - (cfg.n - cfg.m)];
                let poison_seed = seed::derive(cfg.master_seed, "poison", &[id as u64]);
                shards.push(poison_dataset(&shard, t, cfg.poison_fraction, poison_seed)?);
            } else {
                shards.push(shard);
            }
        }
        let finetune = train.subset(&plan.finetune_indices);
        let aggregator = build_aggregator(&cfg.aggregator)?;
        let attack = build_attack(&cfg.attack)?;
        Ok(Self {
            cfg,
            model,
            trigger,
            shards,
            finetune,
            validation,
            malicious_ids,
            aggregator,
            attack,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn trigger(&self) -> &TriggerSpec {
        &self.trigger
    }

    pub fn shard(&self, client_id: usize) -> &Dataset {
        &self.shards[client_id]
    }

    pub fn finetune_set(&self) -> &Dataset {
        &self.finetune
    }

    pub fn validation_set(&self) -> &Dataset {
        &self.validation
    }

    pub fn malicious_ids(&self) -> &[usize] {
        &self.malicious_ids
    }

    pub fn is_malicious(&self, client_id: usize) -> bool {
        client_id >= self.cfg.n - self.cfg.m
    }

    pub fn initial_state(&self) -> RoundState {
        RoundState {
            round: 0,
            weights: self.model.init_weights(seed::derive(self.cfg.master_seed, "init", &[])),
            previous_benign_mean: None,
        }
    }

    /// `(accuracy, asr)` of `w` on the held-out set.
    pub fn evaluate(&self, w: &WeightVector) -> Result<(f64, f64)> {
        let acc = self.model.evaluate(w, &self.validation.samples)?;
        let attack = asr(&self.model, w, &self.validation.samples, &self.trigger)?;
        Ok((acc, attack))
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let s = self.cfg.round_size();
        let mut ids: Vec<usize> = (0..self.cfg.n).collect();
        if s < self.cfg.n {
            ids.shuffle(&mut seed::rng(seed::derive(
                self.cfg.master_seed,
                "participants",
                &[round as u64],
            )));
            ids.truncate(s);
            ids.sort_unstable();
        }
        ids
    }

    /// One round: local training, crafting, aggregation, evaluation.
    pub fn run_round(&self, state: &RoundState) -> Result<(RoundState, EpochRecord)> {
        let r = state.round as u64;
        let master = self.cfg.master_seed;
        let w = &state.weights;
        let participants = self.participants(state.round);
        let (malicious, benign): (Vec<usize>, Vec<usize>) =
            participants.iter().partition(|&&id| self.is_malicious(id));

        let benign_updates = benign
            .par_iter()
            .map(|&id| {
                let tc = self
                    .cfg
                    .benign_train
                    .to_train_config(seed::derive(master, "benign", &[r, id as u64]));
                Ok(ClientUpdate::new(
                    id,
                    self.model.local_train(w, &self.shards[id].samples, &tc)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let benign_mean = if benign_updates.is_empty() {
            None
        } else {
            Some(WeightVector::mean(benign_updates.iter().map(|u| &u.update))?)
        };

        let mut crafted: Option<Crafted> = None;
        if !malicious.is_empty() {
            let shards: Vec<&[_]> = malicious.iter().map(|&id| self.shards[id].samples.as_slice()).collect();
            let cfgs: Vec<_> = malicious
                .iter()
                .map(|&id| {
                    self.cfg
                        .malicious_train
                        .to_train_config(seed::derive(master, "malicious", &[r, id as u64]))
                })
                .collect();
            let (local, local_mean) = malicious_local_updates(&self.model, w, &shards, &cfgs)?;
            let oracle = AdversaryOracle {
                benign_updates: benign_updates.clone(),
                aggregator: self.cfg.aggregator.clone(),
                global_weights: w.clone(),
            };
            let input = CraftInput {
                oracle: &oracle,
                local_updates: &local,
                malicious_mean: &local_mean,
                malicious_ids: &malicious,
                previous_benign_aggregate: state.previous_benign_mean.as_ref(),
                round_size: participants.len(),
            };
            crafted = Some(match self.attack.craft(&input) {
                Ok(c) => c,
                Err(FlError::NoAcceptedAlpha) => {
                    log::debug!("round {}: no accepted alpha, submitting raw updates", state.round + 1);
                    Crafted {
                        submissions: local,
                        alpha: None,
                    }
                }
                Err(e) => return Err(e),
            });
        }

        let mut updates = benign_updates;
        if let Some(c) = &crafted {
            updates.extend(malicious.iter().zip(&c.submissions).map(|(&id, u)| ClientUpdate::new(id, u.clone())));
        }
        updates.sort_by_key(|u| u.client_id);

        let outcome = self
            .aggregator
            .aggregate(&updates, seed::derive(master, "aggregate", &[r]))?;
        let weights = w.add(&outcome.update);
        if !weights.is_finite() {
            return Err(FlError::DegenerateUpdate(format!(
                "global model became non-finite in round {}",
                state.round + 1
            )));
        }

        let delta = match (&benign_mean, &crafted) {
            (Some(b), Some(c)) => Some(b.distance(&WeightVector::mean(&c.submissions)?)),
            _ => None,
        };
        let (accuracy, asr) = self.evaluate(&weights)?;
        let krum_selected = outcome.krum.as_ref().map(|k| k.selected);
        let record = EpochRecord {
            round: state.round + 1,
            accuracy,
            asr,
            alpha: crafted.as_ref().and_then(|c| c.alpha),
            delta,
            krum_selected,
            selected_is_malicious: krum_selected.map(|id| self.is_malicious(id)),
        };
        let next = RoundState {
            round: state.round + 1,
            weights,
            previous_benign_mean: benign_mean,
        };
        Ok((next, record))
    }

    /// All rounds, then optional fine-tuning. Also returns the final weights
    /// (post fine-tuning when configured).
    pub fn run(&self) -> Result<(RunResult, WeightVector)> {
        let mut state = self.initial_state();
        let mut trace = Vec::with_capacity(self.cfg.total_rounds);
        for _ in 0..self.cfg.total_rounds {
            let (next, record) = self.run_round(&state)?;
            log::info!(
                "round {}: acc {:.4} asr {:.4}",
                record.round,
                record.accuracy,
                record.asr
            );
            trace.push(record);
            state = next;
        }
        let (final_train_acc, final_train_asr) = match trace.last() {
            Some(r) => (r.accuracy, r.asr),
            None => self.evaluate(&state.weights)?,
        };

        let mut weights = state.weights;
        let (mut ft_acc, mut ft_asr) = (None, None);
        if let Some(c) = &self.cfg.csft {
            let mut c = c.clone();
            c.seed = seed::derive(self.cfg.master_seed, "csft", &[c.seed]);
            weights = csft(&self.model, &weights, &self.finetune.samples, &c)?;
            let (a, s) = self.evaluate(&weights)?;
            ft_acc = Some(a);
            ft_asr = Some(s);
        }

        let krum_rounds: Vec<bool> = trace
            .iter()
            .filter(|r| r.delta.is_some())
            .filter_map(|r| r.selected_is_malicious)
            .collect();
        let malicious_selected_fraction = (!krum_rounds.is_empty())
            .then(|| krum_rounds.iter().filter(|&&s| s).count() as f64 / krum_rounds.len() as f64);

        let mut defense = self.cfg.aggregator.rule_name().to_string();
        if self.cfg.csft.is_some() {
            defense.push('+');
        }
        let result = RunResult {
            defense,
            attack: self.cfg.attack.kind_name().to_string(),
            m: self.cfg.m,
            master_seed: self.cfg.master_seed,
            trace,
            final_train_acc,
            final_train_asr,
            train_attack_success: final_train_asr > SUCCESS_THRESHOLD,
            ft_acc,
            ft_asr,
            acc_diff: ft_acc.map(|a| a - final_train_acc),
            ft_attack_success: ft_asr.map(|s| s > SUCCESS_THRESHOLD),
            malicious_selected_fraction,
        };
        Ok((result, weights))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    Ok(Federation::new(cfg)?.run()?.0)
}

/// Config parameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    FinetuneFraction,
    CsftEpochs,
    /// Norm-bound threshold (and the attack threshold derived from it).
    NormThreshold,
    M,
    /// Fine-tuning gradient clip; `inf` disables clipping.
    GradClip,
    /// Adaptive-MoM scale factor.
    MomScale,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::FinetuneFraction,
        SweepAxis::CsftEpochs,
        SweepAxis::NormThreshold,
        SweepAxis::M,
        SweepAxis::GradClip,
        SweepAxis::MomScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::FinetuneFraction => "finetune_fraction",
            SweepAxis::CsftEpochs => "csft_epochs",
            SweepAxis::NormThreshold => "norm_threshold",
            SweepAxis::M => "m",
            SweepAxis::GradClip => "grad_clip",
            SweepAxis::MomScale => "mom_scale",
        }
    }

    /// `base` with this axis set to `value`, resolved and validated.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = |what: &str| -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value.is_finite() {
                Ok(value as usize)
            } else {
                Err(FlError::Config(format!("{what} must be a whole number, got {value}")))
            }
        };
        let csft = |cfg: &mut ExperimentConfig| -> Result<()> {
            if cfg.csft.is_none() {
                return Err(FlError::Config(format!(
                    "sweep axis {} needs a [csft] section",
                    self.name()
                )));
            }
            Ok(())
        };
        match self {
            SweepAxis::FinetuneFraction => cfg.data.finetune_fraction = value,
            SweepAxis::CsftEpochs => {
                csft(&mut cfg)?;
                cfg.csft.as_mut().expect("checked").total_epochs = count("csft_epochs")?;
            }
            SweepAxis::GradClip => {
                csft(&mut cfg)?;
                cfg.csft.as_mut().expect("checked").grad_clip = value.is_finite().then_some(value);
            }
            SweepAxis::NormThreshold => {
                let AggregatorConfig::NormBound { threshold } = &mut cfg.aggregator else {
                    return Err(FlError::Config("sweep axis norm_threshold needs the norm_bound aggregator".into()));
                };
                let old = *threshold;
                *threshold = value;
                if let AttackConfig::AdaptiveNorm { threshold } | AttackConfig::ConstrainAndScale { threshold } =
                    &mut cfg.attack
                {
                    if *threshold == Some(old) {
                        *threshold = Some(value);
                    }
                }
            }
            SweepAxis::M => {
                let m = count("m")?;
                if let AggregatorConfig::Krum { m_assumed, .. } = &mut cfg.aggregator {
                    if *m_assumed == Some(cfg.m) {
                        *m_assumed = Some(m);
                    }
                }
                cfg.m = m;
            }
            SweepAxis::MomScale => {
                let AttackConfig::AdaptiveMom { scale_factor } = &mut cfg.attack else {
                    return Err(FlError::Config("sweep axis mom_scale needs the adaptive_mom attack".into()));
                };
                *scale_factor = value;
            }
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = FlError;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let known: Vec<_> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
            FlError::Config(format!("unknown sweep axis `{s}` (known: {})", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub value: f64,
    pub repeat: usize,
    /// The exact config that was run.
    pub config: ExperimentConfig,
    pub result: RunResult,
}

/// Seed of the run for value `value_index`, repeat `repeat`; fits in TOML's
/// signed integers.
pub fn sweep_seed(master_seed: u64, value_index: usize, repeat: usize) -> u64 {
    seed::derive(master_seed, "sweep", &[value_index as u64, repeat as u64]) & i64::MAX as u64
}

/// One independent run per `(value, repeat)`, ordered by value then repeat.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], repeats: usize) -> Result<Vec<SweepRun>> {
    if values.is_empty() || repeats == 0 {
        return Err(FlError::Config("sweep needs at least one value and one repeat".into()));
    }
    let mut jobs = Vec::with_capacity(values.len() * repeats);
    for (vi, &value) in values.iter().enumerate() {
        for repeat in 0..repeats {
            let mut cfg = axis.apply(base, value)?;
            cfg.master_seed = sweep_seed(base.master_seed, vi, repeat);
            jobs.push((value, repeat, cfg));
        }
    }
    jobs.into_par_iter()
        .map(|(value, repeat, config)| {
            let result = run_experiment(&config)?;
            Ok(SweepRun {
                value,
                repeat,
                config,
                result,
            })
        })
        .collect()
}
