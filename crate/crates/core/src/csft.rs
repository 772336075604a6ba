//! Clipped super-fine-tuning: post-training fine-tuning on the aggregator's
//! clean set with a two-phase cyclic learning rate and per-batch gradient
//! clipping.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{FlError, Result};
use crate::model::Mlp;
use crate::seed;
use crate::weights::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsftConfig {
    #[serde(default = "d_lr_base")]
    pub lr_base: f64,
    #[serde(default = "d_lr_max1")]
    pub lr_max1: f64,
    #[serde(default = "d_lr_max2")]
    pub lr_max2: f64,
    #[serde(default = "d_total_epochs")]
    pub total_epochs: usize,
    #[serde(default = "d_cycle_length")]
    pub cycle_length: usize,
    #[serde(default = "d_phase1_fraction")]
    pub phase1_fraction: f64,
    /// Global L2 bound on each mini-batch gradient; `None` disables clipping.
    #[serde(default = "d_grad_clip")]
    pub grad_clip: Option<f64>,
    /// Interpolation weight between the input model (0) and the fine-tuned one (1).
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_lr_base() -> f64 {
    3e-4
}
fn d_lr_max1() -> f64 {
    0.1
}
fn d_lr_max2() -> f64 {
    0.001
}
fn d_total_epochs() -> usize {
    100
}
fn d_cycle_length() -> usize {
    10
}
fn d_phase1_fraction() -> f64 {
    0.5
}
fn d_grad_clip() -> Option<f64> {
    Some(2.0)
}
fn d_gamma() -> f64 {
    1.0
}
fn d_batch_size() -> usize {
    32
}

impl Default for CsftConfig {
    fn default() -> Self {
        Self {
            lr_base: d_lr_base(),
            lr_max1: d_lr_max1(),
            lr_max2: d_lr_max2(),
            total_epochs: d_total_epochs(),
            cycle_length: d_cycle_length(),
            phase1_fraction: d_phase1_fraction(),
            grad_clip: d_grad_clip(),
            gamma: d_gamma(),
            batch_size: d_batch_size(),
            seed: 0,
        }
    }
}

impl CsftConfig {
    /// MNIST setting: base 6e-4, peaks 0.2 / 0.002, no clipping.
    pub fn mnist() -> Self {
        Self {
            lr_base: 6e-4,
            lr_max1: 0.2,
            lr_max2: 0.002,
            grad_clip: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_max2 >= self.lr_base && self.lr_max1 >= self.lr_max2) {
            return Err(FlError::Config(format!(
                "csft needs lr_max1 >= lr_max2 >= lr_base > 0, got {} / {} / {}",
                self.lr_max1, self.lr_max2, self.lr_base
            )));
        }
        if self.cycle_length < 2 {
            return Err(FlError::Config("csft cycle_length must be >= 2".into()));
        }
        if self.total_epochs == 0 {
            return Err(FlError::Config("csft total_epochs must be >= 1".into()));
        }
        if !(self.phase1_fraction > 0.0 && self.phase1_fraction < 1.0) {
            return Err(FlError::Config(format!(
                "csft phase1_fraction must be in (0, 1), got {}",
                self.phase1_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(FlError::Config(format!("csft gamma must be in [0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(FlError::Config("csft batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(FlError::Config(format!("csft grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn phase1_epochs(&self) -> usize {
        (self.phase1_fraction * self.total_epochs as f64).round() as usize
    }
}

/// Learning rate for `epoch`: a linear sawtooth from the phase peak at each
/// cycle start down to `lr_base` at each cycle end. Cycles restart when
/// phase 2 begins.
pub fn schedule_lr(epoch: usize, cfg: &CsftConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(FlError::Input(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    let phase1 = cfg.phase1_epochs();
    let (peak, pos) = if epoch < phase1 {
        (cfg.lr_max1, epoch % cfg.cycle_length)
    } else {
        (cfg.lr_max2, (epoch - phase1) % cfg.cycle_length)
    };
    let t = pos as f64 / (cfg.cycle_length - 1) as f64;
    // convex form is exact at both ends (t = 0 and t = 1)
    Ok(peak * (1.0 - t) + cfg.lr_base * t)
}

/// Fine-tune `w` on the clean set `f` and return `(1 - gamma) w + gamma w_tuned`.
pub fn csft(model: &Mlp, w: &WeightVector, f: &[Sample], cfg: &CsftConfig) -> Result<WeightVector> {
    cfg.validate()?;
    if f.is_empty() {
        return Err(FlError::Input("csft needs a non-empty fine-tuning set".into()));
    }
    if cfg.gamma == 0.0 {
        return Ok(w.clone());
    }
    let mut tuned = w.clone();
    for epoch in 0..cfg.total_epochs {
        let lr = schedule_lr(epoch, cfg)?;
        let shuffle = seed::derive(cfg.seed, "csft-epoch", &[epoch as u64]);
        model.sgd_epoch(&mut tuned, f, lr, cfg.batch_size, cfg.grad_clip, shuffle)?;
    }
    if cfg.gamma == 1.0 {
        return Ok(tuned);
    }
    Ok(w.combine(1.0 - cfg.gamma, &tuned, cfg.gamma))
}
