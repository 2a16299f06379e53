//! Cross-view CLS distillation, masked patch distillation and block-wise
//! masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{HarmonyError, Result};
use crate::mask::{MaskPlan, MaskStyle};
use crate::tensor::Tensor;

/// Largest block-wise mask ratio accepted.
pub const MAX_BLOCK_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedNormalization {
    /// Divide the summed cross-entropy by the number of masked positions.
    #[default]
    MaskedCount,
    /// Plain sum over masked positions.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub student_temp_cls: f64,
    pub teacher_temp_cls: f64,
    pub student_temp_patch: f64,
    pub global_crops: usize,
    pub local_crops: usize,
    /// Candidate base prediction ratios, one picked per image.
    pub pred_ratios: Vec<f64>,
    /// Half-width of the uniform variation added to the base ratio.
    pub pred_ratio_var: f64,
    pub patch_normalization: MaskedNormalization,
    /// Feed the masked view to the teacher and the full view to the student.
    pub teacher_sees_masked_view: bool,
    pub center_momentum: f64,
    pub centering: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_temp_cls: 0.04,
            teacher_temp_cls: 0.04,
            student_temp_patch: 0.1,
            global_crops: 2,
            local_crops: 8,
            pred_ratios: vec![0.0, 0.3],
            pred_ratio_var: 0.2,
            patch_normalization: MaskedNormalization::MaskedCount,
            teacher_sees_masked_view: false,
            center_momentum: 0.9,
            centering: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let temps = [self.student_temp_cls, self.teacher_temp_cls, self.student_temp_patch];
        if temps.iter().any(|t| !(*t > 0.0)) {
            return Err(HarmonyError::Config(
                "distillation temperatures must be positive".into(),
            ));
        }
        if self.global_crops != 2 {
            return Err(HarmonyError::Config("exactly two global crops are supported".into()));
        }
        if self.pred_ratios.is_empty()
            || self.pred_ratios.iter().any(|r| !(0.0..=MAX_BLOCK_RATIO).contains(r))
            || !(0.0..=MAX_BLOCK_RATIO).contains(&self.pred_ratio_var)
        {
            return Err(HarmonyError::Config("prediction ratios must lie in [0, 0.5]".into()));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(HarmonyError::Config("center momentum outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Base ratio drawn from `pred_ratios`, varied by `± pred_ratio_var`,
    /// clamped to `[0, 0.5]`.
    pub fn sample_pred_ratio(&self, rng: &mut impl Rng) -> f64 {
        let base = self.pred_ratios[rng.random_range(0..self.pred_ratios.len())];
        let var = if self.pred_ratio_var > 0.0 {
            rng.random_range(-self.pred_ratio_var..=self.pred_ratio_var)
        } else {
            0.0
        };
        (base + var).clamp(0.0, MAX_BLOCK_RATIO)
    }
}

/// Row-wise softmax of `logits / tau`.
pub fn softmax_with_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(HarmonyError::InvalidArgument(format!(
            "temperature {tau} must be positive"
        )));
    }
    Ok(logits.softmax_rows(tau))
}

/// `Σ_i w_i H(targets_i, softmax(student_i / tau))`.
pub(crate) fn weighted_ce(
    tape: &mut Tape,
    targets: Tensor,
    student_logits: Var,
    tau: f64,
    weights: Vec<f64>,
) -> Result<Var> {
    let z = tape.scale(student_logits, 1.0 / tau);
    tape.soft_cross_entropy(z, targets, weights)
}

/// Mean cross-entropy over every (teacher global view, student view) pair
/// with distinct view indices. `teacher_probs[i]` is the distribution from
/// global view `i`; `student_logits` lists the global views first, in the
/// same order, followed by any local views.
pub fn cls_loss(tape: &mut Tape, teacher_probs: &[Tensor], student_logits: &[Var], tau_s: f64) -> Result<Var> {
    if teacher_probs.is_empty() || student_logits.is_empty() {
        return Err(HarmonyError::InvalidArgument("cls_loss needs views".into()));
    }
    let shape = teacher_probs[0].shape();
    for t in teacher_probs {
        if t.shape() != shape {
            return Err(HarmonyError::Shape("teacher views differ in shape".into()));
        }
    }
    for &s in student_logits {
        if tape.value(s).shape() != shape {
            return Err(HarmonyError::Shape(format!(
                "student view {:?}, teacher {:?}",
                tape.value(s).shape(),
                shape
            )));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..teacher_probs.len())
        .flat_map(|i| (0..student_logits.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(HarmonyError::InvalidArgument("no cross-view pairs".into()));
    }
    let rows = shape.0;
    let w = 1.0 / (rows * pairs.len()) as f64;
    let mut terms = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        let ce = weighted_ce(tape, teacher_probs[i].clone(), student_logits[j], tau_s, vec![w; rows])?;
        terms.push((1.0, ce));
    }
    tape.weighted_sum(&terms)
}

/// Number of (teacher, student) pairs `cls_loss` averages over.
pub fn cls_pair_count(globals: usize, locals: usize) -> usize {
    globals * (globals + locals) - globals
}

/// Cross-entropy at masked positions. `teacher_probs` and `student_logits`
/// hold one row per position of the concatenated `plans`.
pub fn masked_distribution_loss(
    tape: &mut Tape,
    teacher_probs: &Tensor,
    student_logits: Var,
    plans: &[MaskPlan],
    tau_s: f64,
    norm: MaskedNormalization,
) -> Result<Var> {
    let positions: usize = plans.iter().map(MaskPlan::len).sum();
    if tape.value(student_logits).shape() != teacher_probs.shape() || teacher_probs.rows() != positions {
        return Err(HarmonyError::Shape(format!(
            "masked loss: student {:?}, teacher {:?}, {positions} mask positions",
            tape.value(student_logits).shape(),
            teacher_probs.shape()
        )));
    }
    let masked: usize = plans.iter().map(MaskPlan::count).sum();
    if masked == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let w = match norm {
        MaskedNormalization::MaskedCount => 1.0 / masked as f64,
        MaskedNormalization::Sum => 1.0,
    };
    let weights = plans
        .iter()
        .flat_map(|p| p.mask.iter().map(|&m| if m { w } else { 0.0 }))
        .collect();
    weighted_ce(tape, teacher_probs.clone(), student_logits, tau_s, weights)
}

/// Patch-level distillation: teacher distributions on the full view,
/// student logits on the mask-token view.
pub fn mim_loss(
    tape: &mut Tape,
    teacher_probs: &Tensor,
    student_logits: Var,
    plans: &[MaskPlan],
    tau_s: f64,
    norm: MaskedNormalization,
) -> Result<Var> {
    masked_distribution_loss(tape, teacher_probs, student_logits, plans, tau_s, norm)
}

/// `(cls + mim) / 2`
pub fn distill_loss(tape: &mut Tape, cls: Var, mim: Var) -> Result<Var> {
    tape.weighted_sum(&[(0.5, cls), (0.5, mim)])
}

/// Axis-aligned rectangle of patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Block-wise mask plus the rectangles it was built from.
pub fn blockwise_mask_with_blocks(
    grid: (usize, usize),
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<(MaskPlan, Vec<Block>)> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(HarmonyError::InvalidArgument("empty patch grid".into()));
    }
    if !(0.0..=MAX_BLOCK_RATIO).contains(&ratio) {
        return Err(HarmonyError::InvalidArgument(format!(
            "block-wise mask ratio {ratio} outside [0, {MAX_BLOCK_RATIO}]"
        )));
    }
    let l = gh * gw;
    let target = (ratio * l as f64).floor() as usize;
    let mut mask = vec![false; l];
    let mut blocks = Vec::new();
    let mut count = 0;
    let (log_lo, log_hi) = (0.3f64.ln(), (1.0f64 / 0.3).ln());
    while count < target {
        let remaining = target - count;
        let mut placed = false;
        for _ in 0..10 {
            let lo = remaining.min(4);
            let area = rng.random_range(lo..=remaining) as f64;
            let aspect = rng.random_range(log_lo..log_hi).exp();
            let h = ((area * aspect).sqrt().round() as usize).clamp(1, gh);
            let w = ((area / aspect).sqrt().round() as usize).clamp(1, gw);
            let top = rng.random_range(0..=gh - h);
            let left = rng.random_range(0..=gw - w);
            let fresh = (top..top + h)
                .flat_map(|y| (left..left + w).map(move |x| y * gw + x))
                .filter(|&i| !mask[i])
                .count();
            if fresh > 0 && fresh <= remaining {
                for y in top..top + h {
                    for x in left..left + w {
                        mask[y * gw + x] = true;
                    }
                }
                count += fresh;
                blocks.push(Block {
                    top,
                    left,
                    height: h,
                    width: w,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            // fall back to a single free patch so the count is always exact
            let free: Vec<usize> = (0..l).filter(|&i| !mask[i]).collect();
            let i = free[rng.random_range(0..free.len())];
            mask[i] = true;
            count += 1;
            blocks.push(Block {
                top: i / gw,
                left: i % gw,
                height: 1,
                width: 1,
            });
        }
    }
    let style = if target == 0 {
        MaskStyle::Empty
    } else {
        MaskStyle::Blockwise
    };
    Ok((MaskPlan::from_mask(mask, ratio, style), blocks))
}

pub fn blockwise_mask(grid: (usize, usize), ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    Ok(blockwise_mask_with_blocks(grid, ratio, rng)?.0)
}
