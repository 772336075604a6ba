//! Malicious update crafting.
//!
//! The adaptive adversary sees every benign update of the round and the
//! aggregator's full configuration before it submits. Each attack is an
//! [`Attack`] strategy registered by name; [`AttackConfig`] selects one.

use std::fmt::Debug;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{krum_with, AggregatorConfig, ClientUpdate, KrumDistance};
use crate::data::Sample;
use crate::error::{FlError, Result};
use crate::model::{Mlp, TrainConfig};
use crate::registry::Registry;
use crate::weights::WeightVector;

/// Everything the adaptive adversary knows about the round.
#[derive(Debug, Clone)]
pub struct AdversaryOracle {
    pub benign_updates: Vec<ClientUpdate>,
    pub aggregator: AggregatorConfig,
    pub global_weights: WeightVector,
}

impl AdversaryOracle {
    pub fn benign_mean(&self) -> Result<WeightVector> {
        WeightVector::mean(self.benign_updates.iter().map(|u| &u.update))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveKrumParams {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub use_bisection: bool,
    #[serde(default = "default_tol")]
    pub bisection_tol: f64,
    #[serde(default = "default_iters")]
    pub bisection_max_iters: usize,
}

fn default_beta() -> f64 {
    1.5
}
fn default_tol() -> f64 {
    1e-3
}
fn default_iters() -> usize {
    40
}

impl Default for AdaptiveKrumParams {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            use_bisection: false,
            bisection_tol: default_tol(),
            bisection_max_iters: default_iters(),
        }
    }
}

impl AdaptiveKrumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(FlError::Config(format!("adaptive_krum: beta must be > 0, got {}", self.beta)));
        }
        if !(self.bisection_tol > 0.0) {
            return Err(FlError::Config("adaptive_krum: bisection_tol must be > 0".into()));
        }
        if self.bisection_max_iters == 0 {
            return Err(FlError::Config("adaptive_krum: bisection_max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Local training of every malicious client on its poisoned shard.
/// Returns the individual updates and their element-wise mean `w_m`.
pub fn malicious_local_updates(
    model: &Mlp,
    w: &WeightVector,
    poisoned_shards: &[&[Sample]],
    cfgs: &[TrainConfig],
) -> Result<(Vec<WeightVector>, WeightVector)> {
    if poisoned_shards.is_empty() {
        return Err(FlError::Input("no malicious shards".into()));
    }
    if cfgs.len() != poisoned_shards.len() {
        return Err(FlError::Input("one train config per malicious shard".into()));
    }
    let updates = poisoned_shards
        .par_iter()
        .zip(cfgs)
        .map(|(shard, cfg)| model.local_train(w, shard, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mean = WeightVector::mean(&updates)?;
    Ok((updates, mean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrumCraft {
    pub update: WeightVector,
    pub alpha: f64,
    /// Sphere radius from the score heuristic; `None` when bisection chose alpha.
    pub radius: Option<f64>,
    pub bisected: bool,
}

fn krum_params(agg: &AggregatorConfig) -> Result<(usize, KrumDistance)> {
    match *agg {
        AggregatorConfig::Krum {
            m_assumed: Some(m),
            distance,
        } => Ok((m, distance)),
        _ => Err(FlError::Config(format!(
            "adaptive_krum needs a resolved Krum aggregator, got `{}`",
            agg.rule_name()
        ))),
    }
}

/// Benign updates plus one copy of `candidate` per malicious id.
fn simulated_round(oracle: &AdversaryOracle, candidate: &WeightVector, malicious_ids: &[usize]) -> Vec<ClientUpdate> {
    oracle
        .benign_updates
        .iter()
        .cloned()
        .chain(malicious_ids.iter().map(|&id| ClientUpdate::new(id, candidate.clone())))
        .collect()
}

/// Whether Krum would pick one of the malicious copies of `candidate`.
pub fn krum_accepts(oracle: &AdversaryOracle, candidate: &WeightVector, malicious_ids: &[usize]) -> Result<bool> {
    let (m_assumed, distance) = krum_params(&oracle.aggregator)?;
    let round = simulated_round(oracle, candidate, malicious_ids);
    let (_, report) = krum_with(&round, m_assumed, distance)?;
    Ok(malicious_ids.contains(&report.selected))
}

/// `alpha * w_m + (1 - alpha) * w_b`
pub fn interpolate(w_m: &WeightVector, w_b: &WeightVector, alpha: f64) -> WeightVector {
    w_m.combine(alpha, w_b, 1.0 - alpha)
}

/// Largest `alpha` in (0, 1] at which Krum still selects the malicious copy.
///
/// Assumes acceptance is monotone in `alpha`; otherwise returns the largest
/// accepted value seen. Fails when no probed value is accepted.
pub fn bisect_alpha(
    oracle: &AdversaryOracle,
    w_m: &WeightVector,
    w_b: &WeightVector,
    malicious_ids: &[usize],
    tol: f64,
    max_iters: usize,
) -> Result<f64> {
    if krum_accepts(oracle, w_m, malicious_ids)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..max_iters {
        if hi - lo <= tol && lo > 0.0 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if krum_accepts(oracle, &interpolate(w_m, w_b, mid), malicious_ids)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > 0.0 {
        Ok(lo)
    } else {
        Err(FlError::NoAcceptedAlpha)
    }
}

/// Project `w_m` towards the benign mean so that Krum keeps selecting it.
///
/// Radius `r = beta * score(w_l) / p` where `w_l` is the lowest-scoring
/// non-malicious update when Krum runs over the benign updates plus `m` copies
/// of `w_m`, and `p` counts benign clients among the malicious copy's
/// neighbours. The submitted update sits at distance `min(r, |w_m - w_b|)`
/// from the benign mean.
pub fn adaptive_krum(
    oracle: &AdversaryOracle,
    w_m: &WeightVector,
    malicious_ids: &[usize],
    params: &AdaptiveKrumParams,
) -> Result<KrumCraft> {
    params.validate()?;
    if malicious_ids.is_empty() {
        return Err(FlError::Input("adaptive_krum needs at least one malicious client".into()));
    }
    let (m_assumed, distance) = krum_params(&oracle.aggregator)?;
    let w_b = oracle.benign_mean()?;
    w_b.check_layout(w_m)?;
    let gap = w_b.distance(w_m);
    if gap == 0.0 {
        return Ok(KrumCraft {
            update: w_m.clone(),
            alpha: 1.0,
            radius: None,
            bisected: false,
        });
    }

    let bisect = || -> Result<KrumCraft> {
        let alpha = bisect_alpha(
            oracle,
            w_m,
            &w_b,
            malicious_ids,
            params.bisection_tol,
            params.bisection_max_iters,
        )?;
        Ok(KrumCraft {
            update: interpolate(w_m, &w_b, alpha),
            alpha,
            radius: None,
            bisected: true,
        })
    };
    if params.use_bisection {
        return bisect();
    }

    let round = simulated_round(oracle, w_m, malicious_ids);
    let (_, report) = krum_with(&round, m_assumed, distance)?;
    let lowest_benign = report
        .client_ids
        .iter()
        .zip(&report.scores)
        .filter(|(id, _)| !malicious_ids.contains(id))
        .map(|(_, &s)| s)
        .min_by(f64::total_cmp)
        .ok_or_else(|| FlError::Input("adaptive_krum: no benign updates".into()))?;
    let own = report
        .position_of(malicious_ids[0])
        .expect("malicious copy is part of the simulated round");
    let p = report.neighbor_sets[own]
        .iter()
        .filter(|id| !malicious_ids.contains(id))
        .count();
    if p == 0 {
        return bisect();
    }
    let radius = params.beta * lowest_benign / p as f64;
    let alpha = (radius / gap).min(1.0);
    Ok(KrumCraft {
        update: interpolate(w_m, &w_b, alpha),
        alpha,
        radius: Some(radius),
        bisected: false,
    })
}

/// Rescale `w_m` onto the clipping sphere of radius `threshold`.
pub fn adaptive_norm(w_m: &WeightVector, threshold: f64) -> Result<WeightVector> {
    if !(threshold > 0.0) {
        return Err(FlError::Config(format!("norm threshold must be > 0, got {threshold}")));
    }
    let norm = w_m.norm();
    if norm == 0.0 {
        return Err(FlError::DegenerateUpdate("cannot rescale a zero update".into()));
    }
    Ok(w_m.scaled_to_norm(threshold))
}

/// Same mechanics as [`adaptive_norm`]; reported as the constrain-and-scale baseline.
pub fn constrain_and_scale(w_m: &WeightVector, threshold: f64) -> Result<WeightVector> {
    adaptive_norm(w_m, threshold)
}

/// Scale the malicious mean so it dominates its MoM group.
pub fn adaptive_mom(w_m: &WeightVector, scale_factor: f64) -> Result<WeightVector> {
    if !(scale_factor >= 1.0 && scale_factor.is_finite()) {
        return Err(FlError::Config(format!("mom scale_factor must be >= 1, got {scale_factor}")));
    }
    Ok(w_m.scaled(scale_factor))
}

/// `boost * (w_backdoored - global)`
pub fn replacement(oracle: &AdversaryOracle, w_backdoored: &WeightVector, boost: f64) -> Result<WeightVector> {
    if !(boost > 0.0) {
        return Err(FlError::Config(format!("replacement boost must be > 0, got {boost}")));
    }
    oracle.global_weights.check_layout(w_backdoored)?;
    Ok(w_backdoored.sub(&oracle.global_weights).scaled(boost))
}

/// Keep the `keep_fraction` coordinates with the smallest magnitude in the
/// previous benign aggregate (ties to the lower index).
pub fn neurotoxin_mask(previous_benign_aggregate: &WeightVector, keep_fraction: f64) -> Result<Vec<bool>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(FlError::Config(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let values = previous_benign_aggregate.values();
    let keep = ((keep_fraction * values.len() as f64).round() as usize).clamp(1, values.len().max(1));
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; values.len()];
    for &i in order.iter().take(keep) {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn apply_mask(update: &WeightVector, mask: &[bool]) -> WeightVector {
    update.with_values(
        update
            .values()
            .iter()
            .zip(mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect(),
    )
}

/// Serializable attack selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    /// Malicious clients submit their poisoned-data updates unchanged.
    None,
    AdaptiveKrum {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default)]
        use_bisection: bool,
        #[serde(default = "default_tol")]
        bisection_tol: f64,
        #[serde(default = "default_iters")]
        bisection_max_iters: usize,
    },
    AdaptiveNorm {
        /// Defaults to the norm-bound aggregator's threshold.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
    },
    AdaptiveMom {
        #[serde(default = "default_scale")]
        scale_factor: f64,
    },
    Replacement {
        /// Defaults to `n / m`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boost: Option<f64>,
    },
    ConstrainAndScale {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
    },
    Neurotoxin {
        #[serde(default = "default_keep")]
        keep_fraction: f64,
    },
    /// Distributed backdoor: every malicious client poisons with its own slice
    /// of the trigger and submits its update unchanged.
    Dba,
}

fn default_scale() -> f64 {
    1000.0
}
fn default_keep() -> f64 {
    0.1
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::None
    }
}

impl AttackConfig {
    pub fn adaptive_krum(params: AdaptiveKrumParams) -> Self {
        AttackConfig::AdaptiveKrum {
            beta: params.beta,
            use_bisection: params.use_bisection,
            bisection_tol: params.bisection_tol,
            bisection_max_iters: params.bisection_max_iters,
        }
    }

    /// Parameters of an `adaptive_krum` config.
    pub fn krum_params(&self) -> Option<AdaptiveKrumParams> {
        match *self {
            AttackConfig::AdaptiveKrum {
                beta,
                use_bisection,
                bisection_tol,
                bisection_max_iters,
            } => Some(AdaptiveKrumParams {
                beta,
                use_bisection,
                bisection_tol,
                bisection_max_iters,
            }),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AttackConfig::None => "none",
            AttackConfig::AdaptiveKrum { .. } => "adaptive_krum",
            AttackConfig::AdaptiveNorm { .. } => "adaptive_norm",
            AttackConfig::AdaptiveMom { .. } => "adaptive_mom",
            AttackConfig::Replacement { .. } => "replacement",
            AttackConfig::ConstrainAndScale { .. } => "constrain_and_scale",
            AttackConfig::Neurotoxin { .. } => "neurotoxin",
            AttackConfig::Dba => "dba",
        }
    }

    /// Fill thresholds from a norm-bound aggregator where omitted.
    pub fn resolve(&mut self, aggregator: &AggregatorConfig) {
        let agg_threshold = match aggregator {
            AggregatorConfig::NormBound { threshold } => Some(*threshold),
            _ => None,
        };
        match self {
            AttackConfig::AdaptiveNorm { threshold } | AttackConfig::ConstrainAndScale { threshold } => {
                if threshold.is_none() {
                    *threshold = agg_threshold;
                }
            }
            _ => {}
        }
    }

    pub fn validate(&self, aggregator: &AggregatorConfig) -> Result<()> {
        match self {
            AttackConfig::AdaptiveKrum { .. } => {
                self.krum_params().expect("adaptive_krum").validate()?;
                if !matches!(aggregator, AggregatorConfig::Krum { .. }) {
                    return Err(FlError::Config(format!(
                        "adaptive_krum attack requires the krum aggregator, got `{}`",
                        aggregator.rule_name()
                    )));
                }
            }
            AttackConfig::AdaptiveNorm { threshold } | AttackConfig::ConstrainAndScale { threshold } => {
                match threshold {
                    Some(t) if *t > 0.0 => {}
                    Some(t) => return Err(FlError::Config(format!("attack threshold must be > 0, got {t}"))),
                    None => {
                        return Err(FlError::Config(format!(
                            "{} needs a threshold (none given and the aggregator is not norm_bound)",
                            self.kind_name()
                        )))
                    }
                }
            }
            AttackConfig::AdaptiveMom { scale_factor } => {
                if !(*scale_factor >= 1.0 && scale_factor.is_finite()) {
                    return Err(FlError::Config(format!(
                        "adaptive_mom: scale_factor must be >= 1, got {scale_factor}"
                    )));
                }
            }
            AttackConfig::Replacement { boost: Some(b) } if !(*b > 0.0) => {
                return Err(FlError::Config(format!("replacement: boost must be > 0, got {b}")));
            }
            AttackConfig::Neurotoxin { keep_fraction } => {
                if !(*keep_fraction > 0.0 && *keep_fraction <= 1.0) {
                    return Err(FlError::Config(format!(
                        "neurotoxin: keep_fraction must be in (0, 1], got {keep_fraction}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// What the adversary works with when crafting one round's submissions.
#[derive(Debug, Clone, Copy)]
pub struct CraftInput<'a> {
    pub oracle: &'a AdversaryOracle,
    /// Each malicious client's update from training on its poisoned shard.
    pub local_updates: &'a [WeightVector],
    /// Their element-wise mean.
    pub malicious_mean: &'a WeightVector,
    pub malicious_ids: &'a [usize],
    /// Mean benign update of the previous round, if any.
    pub previous_benign_aggregate: Option<&'a WeightVector>,
    /// Clients taking part in the round.
    pub round_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crafted {
    /// One per malicious id, same order.
    pub submissions: Vec<WeightVector>,
    pub alpha: Option<f64>,
}

impl Crafted {
    fn identical(update: WeightVector, m: usize, alpha: Option<f64>) -> Self {
        Self {
            submissions: vec![update; m],
            alpha,
        }
    }
}

/// A malicious-client strategy.
pub trait Attack: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted>;
}

#[derive(Debug, Clone, Copy)]
pub struct Passthrough {
    name: &'static str,
}

impl Attack for Passthrough {
    fn name(&self) -> &'static str {
        self.name
    }

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted> {
        Ok(Crafted {
            submissions: input.local_updates.to_vec(),
            alpha: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveKrumAttack {
    pub params: AdaptiveKrumParams,
}

impl Attack for AdaptiveKrumAttack {
    fn name(&self) -> &'static str {
        "adaptive_krum"
    }

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted> {
        let craft = adaptive_krum(input.oracle, input.malicious_mean, input.malicious_ids, &self.params)?;
        Ok(Crafted::identical(craft.update, input.malicious_ids.len(), Some(craft.alpha)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveNormAttack {
    pub threshold: f64,
}

impl Attack for AdaptiveNormAttack {
    fn name(&self) -> &'static str {
        "adaptive_norm"
    }

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted> {
        let update = adaptive_norm(input.malicious_mean, self.threshold)?;
        Ok(Crafted::identical(update, input.malicious_ids.len(), None))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveMomAttack {
    pub scale_factor: f64,
}

impl Attack for AdaptiveMomAttack {
    fn name(&self) -> &'static str {
        "adaptive_mom"
    }

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted> {
        let update = adaptive_mom(input.malicious_mean, self.scale_factor)?;
        Ok(Crafted::identical(update, input.malicious_ids.len(), None))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReplacementAttack {
    pub boost: Option<f64>,
}

impl Attack for ReplacementAttack {
    fn name(&self) -> &'static str {
        "replacement"
    }

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted> {
        let m = input.malicious_ids.len().max(1);
        let boost = self.boost.unwrap_or(input.round_size as f64 / m as f64);
        let global = &input.oracle.global_weights;
        let submissions = input
            .local_updates
            .iter()
            .map(|u| replacement(input.oracle, &global.add(u), boost))
            .collect::<Result<Vec<_>>>()?;
        Ok(Crafted {
            submissions,
            alpha: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstrainAndScaleAttack {
    pub threshold: f64,
}

impl Attack for ConstrainAndScaleAttack {
    fn name(&self) -> &'static str {
        "constrain_and_scale"
    }

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted> {
        let submissions = input
            .local_updates
            .iter()
            .map(|u| constrain_and_scale(u, self.threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(Crafted {
            submissions,
            alpha: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NeurotoxinAttack {
    pub keep_fraction: f64,
}

impl Attack for NeurotoxinAttack {
    fn name(&self) -> &'static str {
        "neurotoxin"
    }

    fn craft(&self, input: &CraftInput<'_>) -> Result<Crafted> {
        let Some(previous) = input.previous_benign_aggregate else {
            return Passthrough { name: "neurotoxin" }.craft(input);
        };
        let mask = neurotoxin_mask(previous, self.keep_fraction)?;
        Ok(Crafted {
            submissions: input.local_updates.iter().map(|u| apply_mask(u, &mask)).collect(),
            alpha: None,
        })
    }
}

pub type AttackRegistry = Registry<AttackConfig, dyn Attack>;

fn unresolved(kind: &str) -> FlError {
    FlError::Config(format!("{kind}: threshold is unresolved"))
}

/// Registry holding every built-in attack.
pub fn builtin_attacks() -> AttackRegistry {
    let mut reg = AttackRegistry::new("attack");
    reg.register("none", |_| Ok(Box::new(Passthrough { name: "none" })))
        .register("dba", |_| Ok(Box::new(Passthrough { name: "dba" })))
        .register("adaptive_krum", |cfg| match cfg.krum_params() {
            Some(params) => Ok(Box::new(AdaptiveKrumAttack { params })),
            None => Err(mismatch("adaptive_krum", cfg)),
        })
        .register("adaptive_norm", |cfg| match cfg {
            AttackConfig::AdaptiveNorm { threshold } => Ok(Box::new(AdaptiveNormAttack {
                threshold: threshold.ok_or_else(|| unresolved("adaptive_norm"))?,
            })),
            _ => Err(mismatch("adaptive_norm", cfg)),
        })
        .register("adaptive_mom", |cfg| match cfg {
            AttackConfig::AdaptiveMom { scale_factor } => Ok(Box::new(AdaptiveMomAttack {
                scale_factor: *scale_factor,
            })),
            _ => Err(mismatch("adaptive_mom", cfg)),
        })
        .register("replacement", |cfg| match cfg {
            AttackConfig::Replacement { boost } => Ok(Box::new(ReplacementAttack { boost: *boost })),
            _ => Err(mismatch("replacement", cfg)),
        })
        .register("constrain_and_scale", |cfg| match cfg {
            AttackConfig::ConstrainAndScale { threshold } => Ok(Box::new(ConstrainAndScaleAttack {
                threshold: threshold.ok_or_else(|| unresolved("constrain_and_scale"))?,
            })),
            _ => Err(mismatch("constrain_and_scale", cfg)),
        })
        .register("neurotoxin", |cfg| match cfg {
            AttackConfig::Neurotoxin { keep_fraction } => Ok(Box::new(NeurotoxinAttack {
                keep_fraction: *keep_fraction,
            })),
            _ => Err(mismatch("neurotoxin", cfg)),
        });
    reg
}

fn mismatch(name: &str, cfg: &AttackConfig) -> FlError {
    FlError::Config(format!("factory `{name}` given a `{}` config", cfg.kind_name()))
}

pub fn build_attack(cfg: &AttackConfig) -> Result<Box<dyn Attack>> {
    builtin_attacks().build(cfg.kind_name(), cfg)
}
