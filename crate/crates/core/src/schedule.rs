//! Time-indexed hyper-parameter schedules.

use serde::{Deserialize, Serialize};

use crate::error::{HarmonyError, Result};
use crate::reconstruction::MaskRatioSchedule;
use crate::teacher::MomentumSchedule;

/// Half-cosine interpolation from `start` (at `t = 0`) to `end` (at
/// `t >= total`).
pub fn cosine_schedule(t: f64, total: f64, start: f64, end: f64) -> f64 {
    if total <= 0.0 || t >= total {
        return end;
    }
    if t <= 0.0 {
        return start;
    }
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t / total).cos())
}

/// Straight-line interpolation, held at `end` after `total`.
pub fn linear_schedule(t: f64, total: f64, start: f64, end: f64) -> f64 {
    if total <= 0.0 || t >= total {
        return end;
    }
    start + (end - start) * t.max(0.0) / total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Learning rate per 256 samples; scaled by `batch_size / 256` once.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    pub alpha_c_start: f64,
    pub alpha_c_end: f64,
    pub alpha_c_epochs: f64,
    /// Teacher temperature of the patch and word objectives.
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_epochs: f64,
    pub momentum: MomentumSchedule,
    pub mask_ratio: MaskRatioSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 3.0,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            alpha_c_start: 1.0,
            alpha_c_end: 0.2,
            alpha_c_epochs: 10.0,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_epochs: 10.0,
            momentum: MomentumSchedule::default(),
            mask_ratio: MaskRatioSchedule::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.base_lr,
            self.min_lr,
            self.warmup_epochs,
            self.weight_decay_start,
            self.weight_decay_end,
            self.alpha_c_epochs,
            self.teacher_temp_epochs,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HarmonyError::Config("schedule values must be finite and >= 0".into()));
        }
        for a in [self.alpha_c_start, self.alpha_c_end] {
            if !(0.0..=1.0).contains(&a) {
                return Err(HarmonyError::Config(format!("alpha_c {a} outside [0, 1]")));
            }
        }
        if !(self.teacher_temp_start > 0.0 && self.teacher_temp_end > 0.0) {
            return Err(HarmonyError::Config("teacher temperatures must be positive".into()));
        }
        self.momentum.validate()?;
        self.mask_ratio.validate()
    }

    /// The learning rate after batch-size scaling.
    pub fn peak_lr(&self, batch_size: usize) -> f64 {
        self.base_lr * batch_size as f64 / 256.0
    }
}

/// Every scheduled value at one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub epoch: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha_c: f64,
    pub teacher_temp: f64,
    pub momentum: f64,
    pub mask_ratio: f64,
}

/// Resolves a [`ScheduleConfig`] against a concrete run length.
#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    pub config: ScheduleConfig,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub peak_lr: f64,
}

impl Scheduler {
    pub fn new(config: ScheduleConfig, steps_per_epoch: usize, epochs: usize, batch_size: usize) -> Result<Self> {
        config.validate()?;
        if steps_per_epoch == 0 {
            return Err(HarmonyError::Config("an epoch must contain at least one step".into()));
        }
        let peak_lr = config.peak_lr(batch_size);
        Ok(Self {
            config,
            steps_per_epoch,
            epochs,
            peak_lr,
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch * self.epochs) as u64
    }

    pub fn epoch_of(&self, step: u64) -> f64 {
        step as f64 / self.steps_per_epoch as f64
    }

    pub fn lr(&self, step: u64) -> f64 {
        let c = &self.config;
        let spe = self.steps_per_epoch as f64;
        let warm = c.warmup_epochs * spe;
        let t = step as f64;
        if t < warm {
            return self.peak_lr * t / warm;
        }
        let total = self.total_steps() as f64;
        cosine_schedule(t - warm, (total - warm).max(0.0), self.peak_lr, c.min_lr)
    }

    pub fn state(&self, step: u64) -> ScheduleState {
        let c = &self.config;
        let spe = self.steps_per_epoch as f64;
        let t = step as f64;
        let total = self.total_steps() as f64;
        let epoch = self.epoch_of(step);
        ScheduleState {
            step,
            epoch,
            lr: self.lr(step),
            weight_decay: cosine_schedule(t, total, c.weight_decay_start, c.weight_decay_end),
            alpha_c: cosine_schedule(t, c.alpha_c_epochs * spe, c.alpha_c_start, c.alpha_c_end),
            teacher_temp: linear_schedule(t, c.teacher_temp_epochs * spe, c.teacher_temp_start, c.teacher_temp_end),
            momentum: c.momentum.at(step, self.total_steps()),
            mask_ratio: c.mask_ratio.ratio_at(epoch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_schedule(0.0, 10.0, 1.0, 0.2), 1.0);
        assert_eq!(cosine_schedule(10.0, 10.0, 1.0, 0.2), 0.2);
        assert!((cosine_schedule(5.0, 10.0, 1.0, 0.2) - 0.6).abs() < 1e-12);
        assert_eq!(cosine_schedule(50.0, 10.0, 1.0, 0.2), 0.2);
    }

    #[test]
    fn lr_warmup_then_cosine() {
        let s = Scheduler::new(ScheduleConfig::default(), 10, 30, 512).unwrap();
        assert_eq!(s.peak_lr, 1e-3);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(15) - 5e-4).abs() < 1e-15);
        assert!((s.lr(30) - 1e-3).abs() < 1e-15);
        assert!((s.lr(300) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn per_step_alpha_and_teacher_temp() {
        let s = Scheduler::new(ScheduleConfig::default(), 7, 30, 64).unwrap();
        assert_eq!(s.state(0).alpha_c, 1.0);
        assert_eq!(s.state(70).alpha_c, 0.2);
        assert_eq!(s.state(0).teacher_temp, 0.04);
        assert_eq!(s.state(70).teacher_temp, 0.07);
        assert!(s.state(1).alpha_c < 1.0);
        assert_eq!(s.state(0).weight_decay, 0.04);
        assert_eq!(s.state(210).weight_decay, 0.4);
    }
}
