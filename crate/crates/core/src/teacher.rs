//! Exponential-moving-average teachers, momentum schedules and centering.

use serde::{Deserialize, Serialize};

use crate::error::{HarmonyError, Result};
use crate::params::ParamStore;
use crate::schedule::{cosine_schedule, linear_schedule};
use crate::tensor::Tensor;

/// `θ̄ ← m·θ̄ + (1 − m)·θ` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(HarmonyError::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    teacher.ensure_same_layout(student)?;
    for id in student.ids().collect::<Vec<_>>() {
        let s = student.get(id);
        let t = teacher.get_mut(id);
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentumSchedule {
    Constant {
        value: f64,
    },
    /// Half-cosine from `base` to 1 over the whole run.
    CosineToOne {
        base: f64,
    },
    /// Straight line from `start` to `end` over the whole run.
    Linear {
        start: f64,
        end: f64,
    },
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        Self::CosineToOne { base: 0.996 }
    }
}

impl MomentumSchedule {
    pub fn at(&self, step: u64, total_steps: u64) -> f64 {
        let (t, n) = (step as f64, total_steps as f64);
        match *self {
            Self::Constant { value } => value,
            Self::CosineToOne { base } => cosine_schedule(t, n, base, 1.0),
            Self::Linear { start, end } => linear_schedule(t, n, start, end),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals: &[f64] = match self {
            Self::Constant { value } => &[*value],
            Self::CosineToOne { base } => &[*base],
            Self::Linear { start, end } => &[*start, *end],
        };
        if vals.iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(HarmonyError::Config(format!("momentum {self:?} outside [0, 1]")))
        }
    }
}

/// Momentum used by the MaskCLIP baseline: linear from 0.999 to 0.9999.
pub fn maskclip_momentum(step: u64, total_steps: u64) -> Result<f64> {
    if step > total_steps {
        return Err(HarmonyError::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    Ok(linear_schedule(step as f64, total_steps as f64, 0.999, 0.9999))
}

/// Running mean of teacher logits subtracted before the teacher softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub values: Vec<f64>,
    pub momentum: f64,
    pub enabled: bool,
}

impl Center {
    pub fn new(dim: usize, momentum: f64, enabled: bool) -> Self {
        Self {
            values: vec![0.0; dim],
            momentum,
            enabled,
        }
    }

    /// Returns `logits − center`, then moves the center toward the batch
    /// mean of `logits`. A disabled center returns the logits untouched.
    pub fn center_and_update(&mut self, logits: &Tensor) -> Result<Tensor> {
        if !self.enabled {
            return Ok(logits.clone());
        }
        if logits.cols() != self.values.len() || logits.rows() == 0 {
            return Err(HarmonyError::Shape(format!(
                "center of dim {} applied to {:?} logits",
                self.values.len(),
                logits.shape()
            )));
        }
        let mut out = logits.clone();
        for r in 0..out.rows() {
            for (x, c) in out.row_mut(r).iter_mut().zip(&self.values) {
                *x -= c;
            }
        }
        let mean = logits.mean_rows();
        let m = self.momentum;
        for (c, b) in self.values.iter_mut().zip(mean.data()) {
            *c = m * *c + (1.0 - m) * b;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Centers for every self-distillation path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub cls_center: Center,
    pub patch_center: Center,
    pub text_center: Center,
}

impl TeacherState {
    pub fn new(dim: usize, center_momentum: f64, enabled: bool) -> Self {
        Self {
            cls_center: Center::new(dim, center_momentum, enabled),
            patch_center: Center::new(dim, center_momentum, enabled),
            text_center: Center::new(dim, center_momentum, enabled),
        }
    }
}
