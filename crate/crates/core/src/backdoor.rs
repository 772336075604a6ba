//! Trigger patterns, data poisoning and attack-success measurement.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{FlError, Result};
use crate::model::Mlp;
use crate::seed;
use crate::weights::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// Hard patch stamped onto a small block of features.
    Patch,
    /// Whole-input alpha blend with a fixed pattern.
    Blended,
}

/// A concrete trigger over a flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub mask: Vec<f64>,
    pub pattern: Vec<f64>,
    pub target_label: usize,
    pub blend_alpha: f64,
}

impl TriggerSpec {
    /// Patch of `pattern_value` on the given feature indices.
    pub fn patch(dim: usize, footprint: &[usize], pattern_value: f64, target_label: usize) -> Result<Self> {
        let mut mask = vec![0.0; dim];
        for &i in footprint {
            if i >= dim {
                return Err(FlError::Config(format!("trigger feature {i} outside dim {dim}")));
            }
            mask[i] = 1.0;
        }
        let t = Self {
            kind: TriggerKind::Patch,
            mask,
            pattern: vec![pattern_value; dim],
            target_label,
            blend_alpha: 1.0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.pattern.len() {
            return Err(FlError::Config("trigger mask and pattern lengths differ".into()));
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.mask.iter().all(unit) || !self.pattern.iter().all(unit) {
            return Err(FlError::Config("trigger mask and pattern must lie in [0, 1]".into()));
        }
        if !(self.blend_alpha > 0.0 && self.blend_alpha <= 1.0) {
            return Err(FlError::Config(format!(
                "blend_alpha must be in (0, 1], got {}",
                self.blend_alpha
            )));
        }
        if self.kind == TriggerKind::Patch
            && (self.blend_alpha != 1.0 || self.mask.iter().any(|&m| m != 0.0 && m != 1.0))
        {
            return Err(FlError::Config("patch triggers need a 0/1 mask and blend_alpha = 1".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    /// Indices where the mask is active.
    pub fn footprint(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Serializable trigger description; resolved against the data's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    #[serde(default = "default_kind")]
    pub kind: TriggerKind,
    #[serde(default)]
    pub target_label: usize,
    /// Side of the square corner patch (image data) or its feature count squared
    /// (flat data).
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_pattern_value")]
    pub pattern_value: f64,
    #[serde(default = "default_blend_alpha")]
    pub blend_alpha: f64,
    /// Seed of the blended pattern.
    #[serde(default)]
    pub pattern_seed: u64,
}

fn default_kind() -> TriggerKind {
    TriggerKind::Patch
}
fn default_patch_size() -> usize {
    2
}
fn default_pattern_value() -> f64 {
    1.0
}
fn default_blend_alpha() -> f64 {
    0.2
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            target_label: 0,
            patch_size: default_patch_size(),
            pattern_value: default_pattern_value(),
            blend_alpha: default_blend_alpha(),
            pattern_seed: 0,
        }
    }
}

impl TriggerConfig {
    pub fn resolve(&self, dim: usize, image_shape: Option<(usize, usize)>) -> Result<TriggerSpec> {
        let spec = match self.kind {
            TriggerKind::Patch => {
                let side = self.patch_size;
                let footprint: Vec<usize> = match image_shape {
                    Some((rows, cols)) if side <= rows && side <= cols => (0..side)
                        .flat_map(|r| (0..side).map(move |c| r * cols + c))
                        .collect(),
                    _ => (0..side * side).collect(),
                };
                TriggerSpec::patch(dim, &footprint, self.pattern_value, self.target_label)?
            }
            TriggerKind::Blended => {
                let mut rng = seed::rng(self.pattern_seed);
                let spec = TriggerSpec {
                    kind: TriggerKind::Blended,
                    mask: vec![1.0; dim],
                    pattern: (0..dim).map(|_| rng.random_range(0.0..=1.0)).collect(),
                    target_label: self.target_label,
                    blend_alpha: self.blend_alpha,
                };
                spec.validate()?;
                spec
            }
        };
        Ok(spec)
    }
}

/// `x' = (1 - a*mask) * x + a*mask * pattern`, clamped to `[0, 1]`.
pub fn apply_trigger(x: &[f64], t: &TriggerSpec) -> Result<Vec<f64>> {
    if x.len() != t.dim() {
        return Err(FlError::DimensionMismatch {
            expected: t.dim(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(t.mask.iter().zip(&t.pattern))
        .map(|(&xi, (&m, &p))| {
            if m == 0.0 {
                xi
            } else {
                let a = t.blend_alpha * m;
                ((1.0 - a) * xi + a * p).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// Copy of `d` with `round(fraction * |d|)` random samples triggered and relabeled.
pub fn poison_dataset(d: &Dataset, t: &TriggerSpec, poison_fraction: f64, seed: u64) -> Result<Dataset> {
    if d.is_empty() {
        return Err(FlError::Input("cannot poison an empty dataset".into()));
    }
    if !(poison_fraction > 0.0 && poison_fraction <= 1.0) {
        return Err(FlError::Config(format!(
            "poison_fraction must be in (0, 1], got {poison_fraction}"
        )));
    }
    let count = (poison_fraction * d.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut out = d.clone();
    for &i in &order[..count] {
        let s = &mut out.samples[i];
        s.features = apply_trigger(&s.features, t)?;
        s.label = t.target_label;
    }
    Ok(out)
}

/// Fraction of triggered non-target samples classified as the target label.
pub fn asr(model: &Mlp, w: &WeightVector, d_clean: &[Sample], t: &TriggerSpec) -> Result<f64> {
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for s in d_clean.iter().filter(|s| s.label != t.target_label) {
        eligible += 1;
        let x = apply_trigger(&s.features, t)?;
        if model.predict(w, &x) == t.target_label {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Err(FlError::Input("no samples outside the target label for ASR".into()));
    }
    Ok(hits as f64 / eligible as f64)
}

/// Split a patch trigger into `m` disjoint sub-patches of near-equal size.
pub fn split_trigger_dba(t: &TriggerSpec, m: usize) -> Result<Vec<TriggerSpec>> {
    if t.kind != TriggerKind::Patch {
        return Err(FlError::Input("distributed triggers require a patch trigger".into()));
    }
    let footprint = t.footprint();
    if m == 0 || footprint.len() < m {
        return Err(FlError::Input(format!(
            "cannot split a {}-feature trigger into {m} parts",
            footprint.len()
        )));
    }
    let base = footprint.len() / m;
    let extra = footprint.len() % m;
    let mut parts = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let size = base + usize::from(i < extra);
        let mut mask = vec![0.0; t.dim()];
        for &f in &footprint[start..start + size] {
            mask[f] = t.mask[f];
        }
        start += size;
        parts.push(TriggerSpec {
            mask,
            ..t.clone()
        });
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelSpec};

    #[test]
    fn patch_on_zero_input() {
        let t = TriggerSpec::patch(8, &[0, 1, 2, 3], 1.0, 0).unwrap();
        let x = apply_trigger(&[0.0; 8], &t).unwrap();
        assert_eq!(x, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn blend_half() {
        let t = TriggerSpec {
            kind: TriggerKind::Blended,
            mask: vec![1.0; 3],
            pattern: vec![1.0; 3],
            target_label: 0,
            blend_alpha: 0.5,
        };
        assert_eq!(apply_trigger(&[0.0; 3], &t).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn empty_mask_is_identity() {
        let t = TriggerSpec::patch(4, &[], 1.0, 0).unwrap();
        let x = vec![0.1, 0.7, 0.3, 0.9];
        assert_eq!(apply_trigger(&x, &t).unwrap(), x);
        assert!(apply_trigger(&x[..3], &t).is_err());
    }

    #[test]
    fn invalid_triggers() {
        let mut t = TriggerSpec::patch(4, &[0], 1.0, 0).unwrap();
        t.blend_alpha = 0.5;
        assert!(t.validate().is_err());
        assert!(TriggerSpec::patch(4, &[4], 1.0, 0).is_err());
    }

    #[test]
    fn corner_patch_on_image() {
        let t = TriggerConfig::default().resolve(16, Some((4, 4))).unwrap();
        assert_eq!(t.footprint(), vec![0, 1, 4, 5]);
        let flat = TriggerConfig::default().resolve(6, None).unwrap();
        assert_eq!(flat.footprint(), vec![0, 1, 2, 3]);
        let blended = TriggerConfig {
            kind: TriggerKind::Blended,
            ..TriggerConfig::default()
        }
        .resolve(6, None)
        .unwrap();
        assert_eq!(blended.blend_alpha, 0.2);
        assert_eq!(blended.footprint().len(), 6);
    }

    fn dataset(n: usize) -> Dataset {
        Dataset {
            samples: (0..n)
                .map(|i| Sample {
                    features: vec![0.1 * (i % 10) as f64; 4],
                    label: 1 + i % 2,
                })
                .collect(),
            num_classes: 3,
            dim: 4,
            image_shape: Some((2, 2)),
        }
    }

    #[test]
    fn poison_counts() {
        let t = TriggerSpec::patch(4, &[0], 1.0, 0).unwrap();
        let d = dataset(10);
        let all = poison_dataset(&d, &t, 1.0, 1).unwrap();
        assert!(all.samples.iter().all(|s| s.label == 0 && s.features[0] == 1.0));

        let half = poison_dataset(&d, &t, 0.5, 1).unwrap();
        let changed: Vec<usize> = (0..10).filter(|&i| half.samples[i] != d.samples[i]).collect();
        assert_eq!(changed.len(), 5);
        for i in 0..10 {
            if changed.contains(&i) {
                assert_eq!(half.samples[i].label, 0);
                assert_eq!(half.samples[i].features, apply_trigger(&d.samples[i].features, &t).unwrap());
            } else {
                assert_eq!(half.samples[i], d.samples[i]);
            }
        }
        assert_eq!(half, poison_dataset(&d, &t, 0.5, 1).unwrap());
        assert!(poison_dataset(&dataset(0), &t, 0.5, 1).is_err());
        assert!(poison_dataset(&d, &t, 0.0, 1).is_err());
    }

    fn constant_model(class: usize) -> (Mlp, WeightVector) {
        let mlp = Mlp::new(ModelSpec {
            input_dim: 4,
            hidden_dims: vec![],
            num_classes: 3,
            activation: Activation::Relu,
        })
        .unwrap();
        let mut values = vec![0.0; mlp.spec().num_params()];
        values[12 + class] = 1.0;
        let w = WeightVector::new(values, mlp.layout().clone()).unwrap();
        (mlp, w)
    }

    #[test]
    fn asr_of_constant_predictors() {
        let t = TriggerSpec::patch(4, &[0], 1.0, 0).unwrap();
        let d = dataset(6);
        let (mlp, w) = constant_model(0);
        assert_eq!(asr(&mlp, &w, &d.samples, &t).unwrap(), 1.0);
        let (mlp, w) = constant_model(2);
        assert_eq!(asr(&mlp, &w, &d.samples, &t).unwrap(), 0.0);

        let only_target: Vec<Sample> = d
            .samples
            .iter()
            .cloned()
            .map(|mut s| {
                s.label = 0;
                s
            })
            .collect();
        assert!(asr(&mlp, &w, &only_target, &t).is_err());
    }

    #[test]
    fn asr_matches_hand_count() {
        // logit0 = 5*x0, others 0 with bias 1 on class 1: triggered x0=1 -> class 0
        let mlp = Mlp::new(ModelSpec {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
        })
        .unwrap();
        let w = WeightVector::new(vec![5.0, 0.0, 0.0, 0.0, -3.0, 0.0], mlp.layout().clone()).unwrap();
        let t = TriggerSpec::patch(2, &[0], 0.5, 0).unwrap();
        let samples = vec![
            Sample { features: vec![0.0, 0.0], label: 1 },
            Sample { features: vec![0.9, 0.0], label: 1 },
            Sample { features: vec![0.0, 0.4], label: 0 },
        ];
        // triggered x0 = 0.5 for both label-1 samples: 5*0.5 - 3 = -0.5 < 0 -> class 1
        assert_eq!(asr(&mlp, &w, &samples, &t).unwrap(), 0.0);
        let t = TriggerSpec::patch(2, &[0], 1.0, 0).unwrap();
        assert_eq!(asr(&mlp, &w, &samples, &t).unwrap(), 1.0);
    }

    #[test]
    fn dba_split() {
        let t = TriggerSpec::patch(9, &[0, 1, 3, 4], 1.0, 2).unwrap();
        let parts = split_trigger_dba(&t, 2).unwrap();
        assert_eq!(parts[0].footprint(), vec![0, 1]);
        assert_eq!(parts[1].footprint(), vec![3, 4]);
        assert_eq!(split_trigger_dba(&t, 1).unwrap(), vec![t.clone()]);
        assert!(split_trigger_dba(&t, 5).is_err());

        let three = split_trigger_dba(&t, 3).unwrap();
        let x = vec![0.3; 9];
        let mut composed = x.clone();
        for p in &three {
            composed = apply_trigger(&composed, p).unwrap();
        }
        assert_eq!(composed, apply_trigger(&x, &t).unwrap());
    }
}
