//! A small fully-connected classifier with hand-written backpropagation.
//!
//! Weights live in a flat [`WeightVector`]; layer `l` owns two slices,
//! `layer{l}.weight` (row-major `out x in`) followed by `layer{l}.bias`.
//! Hidden layers use ReLU, the output layer produces raw logits and the loss
//! is mean softmax cross-entropy.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{FlError, Result};
use crate::seed;
use crate::weights::{LayerSlice, Layout, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

impl ModelSpec {
    /// MLP `input -> 64 -> 32 -> classes`.
    pub fn mlp(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: default_hidden(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FlError::Config("model input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(FlError::Config("model num_classes must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(FlError::Config("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn layout(&self) -> Layout {
        let mut slices = Vec::new();
        let mut offset = 0;
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            slices.push(LayerSlice {
                name: format!("layer{l}.weight"),
                offset,
                len: fan_in * fan_out,
            });
            offset += fan_in * fan_out;
            slices.push(LayerSlice {
                name: format!("layer{l}.bias"),
                offset,
                len: fan_out,
            });
            offset += fan_out;
        }
        Arc::from(slices)
    }
}

/// The training function applied by clients and by the fine-tuning defense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_batch() -> usize {
    32
}

impl TrainConfig {
    pub fn new(learning_rate: f64, local_epochs: usize, batch_size: usize) -> Self {
        Self {
            learning_rate,
            local_epochs,
            batch_size,
            grad_clip: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it is the identity training function.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FlError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(FlError::Config("batch_size must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(FlError::Config("local_epochs must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(FlError::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Rescale `g` to L2 norm `threshold` if it is longer; otherwise return it untouched.
pub fn clip_gradient(g: &WeightVector, threshold: f64) -> WeightVector {
    let mut out = g.clone();
    clip_in_place(out.values_mut(), threshold);
    out
}

pub(crate) fn clip_in_place(values: &mut [f64], threshold: f64) {
    if crate::weights::l2(values) > threshold {
        crate::weights::scale_to_norm(values, threshold);
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: ModelSpec,
    layout: Layout,
    dims: Vec<(usize, usize)>,
}

impl Mlp {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let dims = spec.layer_dims();
        Ok(Self { spec, layout, dims })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Uniform in `±sqrt(1/fan_in)` for weights and biases alike.
    pub fn init_weights(&self, seed: u64) -> WeightVector {
        let mut rng = seed::rng(seed);
        let mut values = Vec::with_capacity(self.spec.num_params());
        for &(fan_in, fan_out) in &self.dims {
            let bound = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                values.push(rng.random_range(-bound..bound));
            }
        }
        WeightVector::new(values, self.layout.clone()).expect("layout built from spec")
    }

    fn check(&self, w: &WeightVector) -> Result<()> {
        if w.len() != self.spec.num_params() {
            return Err(FlError::DimensionMismatch {
                expected: self.spec.num_params(),
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.spec.input_dim {
            return Err(FlError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: s.features.len(),
            });
        }
        if s.label >= self.spec.num_classes {
            return Err(FlError::Input(format!(
                "label {} out of range for {} classes",
                s.label, self.spec.num_classes
            )));
        }
        Ok(())
    }

    /// Forward pass storing every layer's post-activation output.
    fn forward_into(&self, w: &[f64], x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        acts.push(x.to_vec());
        let mut offset = 0;
        let last = self.dims.len() - 1;
        for (l, &(fan_in, fan_out)) in self.dims.iter().enumerate() {
            let weights = &w[offset..offset + fan_in * fan_out];
            let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let z = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l < last { z.max(0.0) } else { z });
            }
            acts.push(out);
        }
    }

    pub fn logits(&self, w: &WeightVector, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_into(w.values(), x, &mut acts);
        acts.pop().expect("at least one layer")
    }

    /// Argmax of the logits, ties to the lowest class index.
    pub fn predict(&self, w: &WeightVector, x: &[f64]) -> usize {
        argmax(&self.logits(w, x))
    }

    /// Mean softmax cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad<'a, I>(&self, w: &WeightVector, batch: I) -> Result<(f64, WeightVector)>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        self.check(w)?;
        let mut grad = vec![0.0; w.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        let mut acts = Vec::new();
        let wv = w.values();
        for sample in batch {
            self.check_sample(sample)?;
            total += self.accumulate(wv, sample, &mut acts, &mut grad);
            count += 1;
        }
        if count == 0 {
            return Err(FlError::Input("empty batch".into()));
        }
        let inv = 1.0 / count as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        Ok((total * inv, w.with_values(grad)))
    }

    /// Adds this sample's (unnormalized) gradient into `grad`, returns its loss.
    fn accumulate(&self, w: &[f64], sample: &Sample, acts: &mut Vec<Vec<f64>>, grad: &mut [f64]) -> f64 {
        self.forward_into(w, &sample.features, acts);
        let logits = acts.last().expect("output layer");
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - logits[sample.label];

        // dL/dz for the output layer
        let mut delta: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        delta[sample.label] -= 1.0;

        let offsets: Vec<usize> = self
            .dims
            .iter()
            .scan(0, |off, &(i, o)| {
                let start = *off;
                *off += i * o + o;
                Some(start)
            })
            .collect();

        for l in (0..self.dims.len()).rev() {
            let (fan_in, fan_out) = self.dims[l];
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let weights = &w[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wt) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wt;
                    }
                }
                // ReLU derivative: the stored activation is positive iff z > 0
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        loss
    }

    /// One epoch of shuffled mini-batch SGD at a fixed learning rate.
    pub(crate) fn sgd_epoch(
        &self,
        w: &mut WeightVector,
        data: &[Sample],
        lr: f64,
        batch_size: usize,
        grad_clip: Option<f64>,
        shuffle_seed: u64,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(shuffle_seed));
        for chunk in order.chunks(batch_size) {
            let (_, mut grad) = self.loss_and_grad(w, chunk.iter().map(|&i| &data[i]))?;
            if let Some(t) = grad_clip {
                clip_in_place(grad.values_mut(), t);
            }
            w.add_scaled(-lr, &grad);
        }
        Ok(())
    }

    /// Local training `T(w, d)`: returns the update `w_final - w`.
    pub fn local_train(&self, w: &WeightVector, data: &[Sample], cfg: &TrainConfig) -> Result<WeightVector> {
        if data.is_empty() {
            return Err(FlError::Input("local_train on an empty dataset".into()));
        }
        cfg.validate()?;
        self.check(w)?;
        let mut current = w.clone();
        for epoch in 0..cfg.local_epochs {
            let shuffle = seed::derive(cfg.seed, "epoch", &[epoch as u64]);
            self.sgd_epoch(&mut current, data, cfg.learning_rate, cfg.batch_size, cfg.grad_clip, shuffle)?;
        }
        Ok(current.sub(w))
    }

    /// Fraction of samples whose predicted class equals the label.
    pub fn evaluate(&self, w: &WeightVector, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(FlError::Input("evaluate on an empty dataset".into()));
        }
        self.check(w)?;
        let correct = data.iter().filter(|s| self.predict(w, &s.features) == s.label).count();
        Ok(correct as f64 / data.len() as f64)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(features: Vec<f64>, label: usize) -> Sample {
        Sample { features, label }
    }

    fn toy() -> Mlp {
        Mlp::new(ModelSpec {
            input_dim: 3,
            hidden_dims: vec![4],
            num_classes: 3,
            activation: Activation::Relu,
        })
        .unwrap()
    }

    #[test]
    fn parameter_count_without_hidden_layers() {
        let spec = ModelSpec {
            input_dim: 1,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
        };
        let mlp = Mlp::new(spec).unwrap();
        let w = mlp.init_weights(7);
        assert_eq!(w.len(), 4);
        let covered: usize = w.layout().iter().map(|s| s.len).sum();
        assert_eq!(covered, 4);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mlp = toy();
        assert_eq!(mlp.init_weights(7), mlp.init_weights(7));
        assert_ne!(mlp.init_weights(7), mlp.init_weights(8));
        let bound = (1.0f64 / 3.0).sqrt();
        assert!(mlp.init_weights(7).layer(0).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = ModelSpec::mlp(4, 1);
        assert!(spec.validate().is_err());
        spec.num_classes = 2;
        spec.hidden_dims = vec![3, 0];
        assert!(spec.validate().is_err());
        spec.input_dim = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_weights_give_ln_classes() {
        let mlp = toy();
        let w = mlp.init_weights(1).zeros_like();
        let (loss, _) = mlp.loss_and_grad(&w, &[sample(vec![0.3, 0.9, 0.1], 2)]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_grad() {
        let mlp = toy();
        let w = mlp.init_weights(3);
        let batch = vec![sample(vec![0.1, 0.5, 0.7], 0), sample(vec![0.9, 0.2, 0.3], 1)];
        let doubled: Vec<Sample> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l1, g1) = mlp.loss_and_grad(&w, &batch).unwrap();
        let (l2, g2) = mlp.loss_and_grad(&w, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mlp = toy();
        let w = mlp.init_weights(3);
        assert!(matches!(
            mlp.loss_and_grad(&w, &[sample(vec![0.1, 0.2], 0)]),
            Err(FlError::DimensionMismatch { .. })
        ));
        assert!(mlp.loss_and_grad(&w, &[]).is_err());
    }

    #[test]
    fn clip_examples() {
        let g = WeightVector::flat(vec![3.0, 4.0]);
        assert_eq!(clip_gradient(&g, 2.5).values(), &[1.5, 2.0]);
        let small = WeightVector::flat(vec![1.0, 0.0]);
        assert_eq!(clip_gradient(&small, 5.0), small);
    }

    #[test]
    fn zero_learning_rate_is_no_movement() {
        let mlp = toy();
        let w = mlp.init_weights(3);
        let data = vec![sample(vec![0.1, 0.5, 0.7], 0), sample(vec![0.9, 0.2, 0.3], 1)];
        let u = mlp.local_train(&w, &data, &TrainConfig::new(0.0, 2, 1)).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
        assert!(mlp.local_train(&w, &[], &TrainConfig::new(0.1, 1, 1)).is_err());
    }

    #[test]
    fn single_full_batch_step_matches_closed_form() {
        let mlp = toy();
        let w = mlp.init_weights(5);
        let data = vec![
            sample(vec![0.1, 0.5, 0.7], 0),
            sample(vec![0.9, 0.2, 0.3], 1),
            sample(vec![0.4, 0.4, 0.1], 2),
        ];
        let mut cfg = TrainConfig::new(0.3, 1, data.len());
        cfg.grad_clip = Some(0.05);
        let u = mlp.local_train(&w, &data, &cfg).unwrap();
        let (_, g) = mlp.loss_and_grad(&w, &data).unwrap();
        let expected = clip_gradient(&g, 0.05).scaled(-0.3);
        for (a, b) in u.values().iter().zip(expected.values()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn evaluate_constant_predictor() {
        // no hidden layer; bias favours class 0
        let mlp = Mlp::new(ModelSpec {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
        })
        .unwrap();
        let w = WeightVector::new(vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0], mlp.layout().clone()).unwrap();
        let zeros = vec![sample(vec![0.2, 0.3], 0), sample(vec![0.8, 0.1], 0)];
        let ones = vec![sample(vec![0.2, 0.3], 1), sample(vec![0.8, 0.1], 1)];
        assert_eq!(mlp.evaluate(&w, &zeros).unwrap(), 1.0);
        assert_eq!(mlp.evaluate(&w, &ones).unwrap(), 0.0);
        // all-zero logits tie: lowest index wins
        let tie = w.zeros_like();
        assert_eq!(mlp.predict(&tie, &[0.5, 0.5]), 0);
        assert!(mlp.evaluate(&w, &[]).is_err());
    }
}
