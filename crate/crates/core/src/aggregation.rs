//! Aggregation rules: plain averaging and the robust first-line defenses.
//!
//! Every rule sees only `(client_id, update)` pairs. Which clients are
//! malicious is tracked by the orchestrator and never reaches this module.

use std::fmt::Debug;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};
use crate::registry::Registry;
use crate::seed;
use crate::weights::WeightVector;

/// One client's submitted update.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub update: WeightVector,
}

impl ClientUpdate {
    pub fn new(client_id: usize, update: WeightVector) -> Self {
        Self { client_id, update }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrumDistance {
    /// `||u_i - u_j||^2`, as in the original Krum definition.
    #[default]
    Squared,
    /// `||u_i - u_j||`
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorConfig {
    FedAvg,
    Krum {
        /// Number of Byzantine clients Krum is configured for. Filled from the
        /// experiment's `m` when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m_assumed: Option<usize>,
        #[serde(default)]
        distance: KrumDistance,
    },
    NormBound {
        threshold: f64,
    },
    Mom {
        #[serde(default = "default_groups")]
        num_groups: usize,
    },
    RobustMom {
        #[serde(default = "default_groups")]
        num_groups: usize,
        #[serde(default = "default_repeats")]
        k_repeats: usize,
    },
}

fn default_groups() -> usize {
    5
}

fn default_repeats() -> usize {
    10
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig::FedAvg
    }
}

impl AggregatorConfig {
    pub fn krum(m_assumed: usize) -> Self {
        AggregatorConfig::Krum {
            m_assumed: Some(m_assumed),
            distance: KrumDistance::Squared,
        }
    }

    /// Registry name of the rule.
    pub fn rule_name(&self) -> &'static str {
        match self {
            AggregatorConfig::FedAvg => "fed_avg",
            AggregatorConfig::Krum { .. } => "krum",
            AggregatorConfig::NormBound { .. } => "norm_bound",
            AggregatorConfig::Mom { .. } => "mom",
            AggregatorConfig::RobustMom { .. } => "robust_mom",
        }
    }

    /// Checks parameter ranges; `n` (clients per round), when known, is
    /// checked against Krum's and MoM's requirements.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        match *self {
            AggregatorConfig::FedAvg => {}
            AggregatorConfig::Krum { m_assumed, .. } => {
                let m = m_assumed
                    .ok_or_else(|| FlError::Config("krum: m_assumed is unresolved".into()))?;
                if let Some(n) = n {
                    check_krum(n, m)?;
                }
            }
            AggregatorConfig::NormBound { threshold } => {
                if !(threshold > 0.0 && threshold.is_finite()) {
                    return Err(FlError::Config(format!(
                        "norm_bound: threshold must be > 0, got {threshold}"
                    )));
                }
            }
            AggregatorConfig::Mom { num_groups } => check_groups(num_groups, n)?,
            AggregatorConfig::RobustMom {
                num_groups,
                k_repeats,
            } => {
                check_groups(num_groups, n)?;
                if k_repeats == 0 {
                    return Err(FlError::Config("robust_mom: k_repeats must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

fn check_krum(n: usize, m_assumed: usize) -> Result<()> {
    if 2 * m_assumed + 2 >= n {
        return Err(FlError::Config(format!(
            "krum requires 2m+2 < n, got m = {m_assumed}, n = {n} (2m+2 = {})",
            2 * m_assumed + 2
        )));
    }
    Ok(())
}

fn check_groups(num_groups: usize, n: Option<usize>) -> Result<()> {
    if num_groups < 2 {
        return Err(FlError::Config(format!("mom: num_groups must be >= 2, got {num_groups}")));
    }
    if let Some(n) = n {
        if num_groups > n {
            return Err(FlError::Config(format!(
                "mom: {num_groups} groups but only {n} clients"
            )));
        }
    }
    Ok(())
}

/// Per-round Krum diagnostics. Vectors are indexed by input position.
#[derive(Debug, Clone, PartialEq)]
pub struct KrumReport {
    pub client_ids: Vec<usize>,
    pub scores: Vec<f64>,
    /// Client id of the selected update.
    pub selected: usize,
    /// Client ids of each update's `n - m - 2` nearest neighbours, nearest first.
    pub neighbor_sets: Vec<Vec<usize>>,
}

impl KrumReport {
    pub fn position_of(&self, client_id: usize) -> Option<usize> {
        self.client_ids.iter().position(|&c| c == client_id)
    }

    pub fn score_of(&self, client_id: usize) -> Option<f64> {
        self.position_of(client_id).map(|p| self.scores[p])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub update: WeightVector,
    pub krum: Option<KrumReport>,
}

/// A first-line aggregation rule.
pub trait Aggregator: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn aggregate(&self, updates: &[ClientUpdate], seed: u64) -> Result<AggregateOutcome>;
}

fn check_round(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates
        .first()
        .ok_or_else(|| FlError::Input("aggregation over zero updates".into()))?;
    for u in &updates[1..] {
        first.update.check_layout(&u.update)?;
    }
    Ok(())
}

fn by_client_id(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    sorted
}

/// Element-wise mean, summed in ascending client id order.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<WeightVector> {
    check_round(updates)?;
    WeightVector::mean(by_client_id(updates).into_iter().map(|u| &u.update))
}

/// Krum with squared distances.
pub fn krum(updates: &[ClientUpdate], m_assumed: usize) -> Result<(WeightVector, KrumReport)> {
    krum_with(updates, m_assumed, KrumDistance::Squared)
}

pub fn krum_with(
    updates: &[ClientUpdate],
    m_assumed: usize,
    distance: KrumDistance,
) -> Result<(WeightVector, KrumReport)> {
    check_round(updates)?;
    check_krum(updates.len(), m_assumed)?;
    Ok(krum_unchecked(updates, updates.len() - m_assumed - 2, distance))
}

/// Krum scoring with `k` neighbours and no constraint check.
fn krum_unchecked(updates: &[ClientUpdate], k: usize, distance: KrumDistance) -> (WeightVector, KrumReport) {
    let n = updates.len();

    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d2 = updates[i].update.distance_sq(&updates[j].update);
            let d = match distance {
                KrumDistance::Squared => d2,
                KrumDistance::Plain => d2.sqrt(),
            };
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut scores = Vec::with_capacity(n);
    let mut neighbor_sets = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            dist[i][a]
                .total_cmp(&dist[i][b])
                .then(updates[a].client_id.cmp(&updates[b].client_id))
        });
        others.truncate(k);
        scores.push(others.iter().map(|&j| dist[i][j]).sum::<f64>());
        neighbor_sets.push(others.iter().map(|&j| updates[j].client_id).collect());
    }

    let best = (0..n)
        .min_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(updates[a].client_id.cmp(&updates[b].client_id))
        })
        .expect("non-empty round");

    let report = KrumReport {
        client_ids: updates.iter().map(|u| u.client_id).collect(),
        scores,
        selected: updates[best].client_id,
        neighbor_sets,
    };
    (updates[best].update.clone(), report)
}

/// Clip each update to L2 norm `threshold`, then average.
pub fn norm_bound(updates: &[ClientUpdate], threshold: f64) -> Result<WeightVector> {
    if !(threshold > 0.0) {
        return Err(FlError::Config(format!("norm_bound: threshold must be > 0, got {threshold}")));
    }
    let clipped: Vec<ClientUpdate> = updates
        .iter()
        .map(|u| ClientUpdate::new(u.client_id, crate::model::clip_gradient(&u.update, threshold)))
        .collect();
    fed_avg(&clipped)
}

fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 0 {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    }
}

/// Median of means, computed layer by layer with a fresh random grouping per layer.
pub fn mom(updates: &[ClientUpdate], num_groups: usize, seed: u64) -> Result<WeightVector> {
    check_round(updates)?;
    check_groups(num_groups, Some(updates.len()))?;
    let sorted = by_client_id(updates);
    let template = &sorted[0].update;
    let mut out = template.zeros_like();

    for (layer, slice) in template.layout().iter().enumerate() {
        let mut order: Vec<usize> = (0..sorted.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(seed, "mom-layer", &[layer as u64])));

        // deal round-robin: position p goes to group p % G
        let mut means = vec![vec![0.0; slice.len]; num_groups];
        let mut counts = vec![0usize; num_groups];
        // shifted by each group's first member so unanimous groups stay exact
        let mut firsts: Vec<Option<&[f64]>> = vec![None; num_groups];
        for (p, &idx) in order.iter().enumerate() {
            let g = p % num_groups;
            counts[g] += 1;
            let values = sorted[idx].update.layer(layer);
            let first = *firsts[g].get_or_insert(values);
            for ((acc, v), f) in means[g].iter_mut().zip(values).zip(first) {
                *acc += v - f;
            }
        }
        for ((mean, &c), first) in means.iter_mut().zip(&counts).zip(&firsts) {
            let first = first.expect("every group has a member");
            for (v, f) in mean.iter_mut().zip(first) {
                *v = f + *v / c as f64;
            }
        }

        let mut column = vec![0.0; num_groups];
        let dest = &mut out.values_mut()[slice.offset..slice.offset + slice.len];
        for (j, d) in dest.iter_mut().enumerate() {
            for (g, mean) in means.iter().enumerate() {
                column[g] = mean[j];
            }
            *d = median_in_place(&mut column);
        }
    }
    Ok(out)
}

/// Seed of repetition `rep` inside [`robust_mom`].
pub fn robust_mom_seed(seed: u64, rep: usize) -> u64 {
    seed::derive(seed, "robust-mom", &[rep as u64])
}

/// Mean of `k_repeats` independent MoM estimates.
pub fn robust_mom(updates: &[ClientUpdate], num_groups: usize, k_repeats: usize, seed: u64) -> Result<WeightVector> {
    if k_repeats == 0 {
        return Err(FlError::Config("robust_mom: k_repeats must be >= 1".into()));
    }
    let runs = (0..k_repeats)
        .map(|rep| mom(updates, num_groups, robust_mom_seed(seed, rep)))
        .collect::<Result<Vec<_>>>()?;
    WeightVector::mean(&runs)
}

#[derive(Debug, Clone, Copy)]
pub struct FedAvg;

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fed_avg"
    }

    fn aggregate(&self, updates: &[ClientUpdate], _seed: u64) -> Result<AggregateOutcome> {
        Ok(AggregateOutcome {
            update: fed_avg(updates)?,
            krum: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Krum {
    pub m_assumed: usize,
    pub distance: KrumDistance,
}

impl Aggregator for Krum {
    fn name(&self) -> &'static str {
        "krum"
    }

    fn aggregate(&self, updates: &[ClientUpdate], _seed: u64) -> Result<AggregateOutcome> {
        let (update, report) = krum_with(updates, self.m_assumed, self.distance)?;
        Ok(AggregateOutcome {
            update,
            krum: Some(report),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormBound {
    pub threshold: f64,
}

impl Aggregator for NormBound {
    fn name(&self) -> &'static str {
        "norm_bound"
    }

    fn aggregate(&self, updates: &[ClientUpdate], _seed: u64) -> Result<AggregateOutcome> {
        Ok(AggregateOutcome {
            update: norm_bound(updates, self.threshold)?,
            krum: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MedianOfMeans {
    pub num_groups: usize,
}

impl Aggregator for MedianOfMeans {
    fn name(&self) -> &'static str {
        "mom"
    }

    fn aggregate(&self, updates: &[ClientUpdate], seed: u64) -> Result<AggregateOutcome> {
        Ok(AggregateOutcome {
            update: mom(updates, self.num_groups, seed)?,
            krum: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RobustMedianOfMeans {
    pub num_groups: usize,
    pub k_repeats: usize,
}

impl Aggregator for RobustMedianOfMeans {
    fn name(&self) -> &'static str {
        "robust_mom"
    }

    fn aggregate(&self, updates: &[ClientUpdate], seed: u64) -> Result<AggregateOutcome> {
        Ok(AggregateOutcome {
            update: robust_mom(updates, self.num_groups, self.k_repeats, seed)?,
            krum: None,
        })
    }
}

pub type AggregatorRegistry = Registry<AggregatorConfig, dyn Aggregator>;

/// Registry holding every built-in rule.
pub fn builtin_aggregators() -> AggregatorRegistry {
    let mut reg = AggregatorRegistry::new("aggregator");
    reg.register("fed_avg", |_| Ok(Box::new(FedAvg)))
        .register("krum", |cfg| match *cfg {
            AggregatorConfig::Krum { m_assumed, distance } => Ok(Box::new(Krum {
                m_assumed: m_assumed
                    .ok_or_else(|| FlError::Config("krum: m_assumed is unresolved".into()))?,
                distance,
            })),
            _ => Err(mismatch("krum", cfg)),
        })
        .register("norm_bound", |cfg| match *cfg {
            AggregatorConfig::NormBound { threshold } => Ok(Box::new(NormBound { threshold })),
            _ => Err(mismatch("norm_bound", cfg)),
        })
        .register("mom", |cfg| match *cfg {
            AggregatorConfig::Mom { num_groups } => Ok(Box::new(MedianOfMeans { num_groups })),
            _ => Err(mismatch("mom", cfg)),
        })
        .register("robust_mom", |cfg| match *cfg {
            AggregatorConfig::RobustMom {
                num_groups,
                k_repeats,
            } => Ok(Box::new(RobustMedianOfMeans {
                num_groups,
                k_repeats,
            })),
            _ => Err(mismatch("robust_mom", cfg)),
        });
    reg
}

fn mismatch(name: &str, cfg: &AggregatorConfig) -> FlError {
    FlError::Config(format!("factory `{name}` given a `{}` config", cfg.rule_name()))
}

/// Build the rule named by `cfg` from the built-in registry.
pub fn build_aggregator(cfg: &AggregatorConfig) -> Result<Box<dyn Aggregator>> {
    cfg.validate(None)?;
    builtin_aggregators().build(cfg.rule_name(), cfg)
}

/// Dispatch to the rule named by `cfg`.
pub fn aggregate(updates: &[ClientUpdate], cfg: &AggregatorConfig, seed: u64) -> Result<AggregateOutcome> {
    build_aggregator(cfg)?.aggregate(updates, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ups(values: &[&[f64]]) -> Vec<ClientUpdate> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| ClientUpdate::new(i, WeightVector::flat(v.to_vec())))
            .collect()
    }

    #[test]
    fn fed_avg_examples() {
        assert_eq!(fed_avg(&ups(&[&[1.0], &[3.0]])).unwrap().values(), &[2.0]);
        assert_eq!(fed_avg(&ups(&[&[1.5, -2.0]])).unwrap().values(), &[1.5, -2.0]);
        assert!(fed_avg(&[]).is_err());
        let mixed = vec![
            ClientUpdate::new(0, WeightVector::flat(vec![1.0])),
            ClientUpdate::new(1, WeightVector::flat(vec![1.0, 2.0])),
        ];
        assert!(fed_avg(&mixed).is_err());
    }

    #[test]
    fn krum_hand_computed() {
        // n = 4, m = 1 breaks 2m+2 < n, so the public entry point refuses it;
        // the scoring itself is checked with its single nearest neighbour.
        let u = ups(&[&[0.0], &[0.1], &[0.2], &[5.0]]);
        assert!(krum(&u, 1).is_err());
        let (update, report) = krum_unchecked(&u, 1, KrumDistance::Squared);
        let expected = [0.01, 0.01, 0.01, 23.04];
        for (s, e) in report.scores.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12, "{s} vs {e}");
        }
        assert_eq!(report.selected, 0);
        assert_eq!(update.values(), &[0.0]);
        assert!(report.neighbor_sets.iter().all(|n| n.len() == 1));
        assert_eq!(report.neighbor_sets[3], vec![2]);
    }

    #[test]
    fn krum_identical_updates() {
        let (update, report) = krum(&ups(&[&[1.0, 2.0] as &[f64]; 5]), 1).unwrap();
        assert!(report.scores.iter().all(|&s| s == 0.0));
        assert_eq!(report.selected, 0);
        assert_eq!(update.values(), &[1.0, 2.0]);
    }

    #[test]
    fn krum_constraint() {
        let err = krum(&ups(&[&[0.0] as &[f64]; 4]), 1).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("2m+2 < n"), "{err}");
        assert!(krum(&ups(&[&[0.0] as &[f64]; 5]), 1).is_ok());
    }

    #[test]
    fn krum_plain_distance() {
        let (_, report) = krum_unchecked(&ups(&[&[0.0], &[0.1], &[0.2], &[5.0]]), 1, KrumDistance::Plain);
        assert!((report.scores[3] - 4.8).abs() < 1e-12);
    }

    #[test]
    fn norm_bound_examples() {
        assert_eq!(norm_bound(&ups(&[&[3.0, 4.0]]), 2.5).unwrap().values(), &[1.5, 2.0]);
        let small = ups(&[&[0.1, 0.2], &[-0.3, 0.0]]);
        assert_eq!(norm_bound(&small, 10.0).unwrap(), fed_avg(&small).unwrap());
        assert!(norm_bound(&small, 0.0).is_err());
    }

    #[test]
    fn mom_singletons_median() {
        let u = ups(&[&[1.0], &[1.0], &[10.0]]);
        assert_eq!(mom(&u, 3, 9).unwrap().values(), &[1.0]);
        assert!(mom(&u, 4, 9).is_err());
        assert!(mom(&u, 1, 9).is_err());
    }

    #[test]
    fn mom_two_groups_is_mean() {
        let u = ups(&[&[1.0, -2.0], &[4.0, 0.5], &[-3.0, 7.0], &[2.5, 1.0]]);
        let avg = fed_avg(&u).unwrap();
        let out = mom(&u, 2, 11).unwrap();
        for (a, b) in out.values().iter().zip(avg.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn robust_mom_k1_and_loop() {
        let u = ups(&[&[1.0, -2.0], &[4.0, 0.5], &[-3.0, 7.0], &[2.5, 1.0], &[0.0, 0.0]]);
        assert_eq!(robust_mom(&u, 2, 1, 5).unwrap(), mom(&u, 2, robust_mom_seed(5, 0)).unwrap());
        assert!(robust_mom(&u, 2, 0, 5).is_err());
    }

    #[test]
    fn dispatch() {
        let u = ups(&[&[1.0], &[2.0], &[3.0], &[4.0], &[100.0]]);
        let out = aggregate(&u, &AggregatorConfig::FedAvg, 0).unwrap();
        assert_eq!(out.update, fed_avg(&u).unwrap());
        assert!(out.krum.is_none());
        let out = aggregate(&u, &AggregatorConfig::krum(1), 0).unwrap();
        assert!(out.krum.is_some());
        let unresolved = AggregatorConfig::Krum {
            m_assumed: None,
            distance: KrumDistance::Squared,
        };
        assert!(aggregate(&u, &unresolved, 0).is_err());
        assert!(aggregate(&u, &AggregatorConfig::NormBound { threshold: -1.0 }, 0).is_err());
    }

    #[test]
    fn registry_lists_all_rules() {
        assert_eq!(
            builtin_aggregators().names(),
            vec!["fed_avg", "krum", "mom", "norm_bound", "robust_mom"]
        );
    }

    #[test]
    fn config_toml_shape() {
        let cfg: AggregatorConfig = toml::from_str("rule = \"robust_mom\"\nnum_groups = 4").unwrap();
        assert_eq!(
            cfg,
            AggregatorConfig::RobustMom {
                num_groups: 4,
                k_repeats: 10
            }
        );
        assert!(toml::from_str::<AggregatorConfig>("rule = \"mom\"\nnum_group = 4").is_err());
        assert!(toml::from_str::<AggregatorConfig>("rule = \"trimmed_mean\"").is_err());
    }
}
