//! Masked pixel reconstruction with random patch removal.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{HarmonyError, Result};
use crate::mask::{MaskPlan, MaskStyle};
use crate::schedule::linear_schedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetNormalization {
    /// `(x − mean) / √(var + 1e-6)` per patch.
    #[default]
    PerPatchStandardize,
    /// `x / ‖x‖₂` per patch.
    L2Literal,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionNormalization {
    /// Divide by the total patch count `L`.
    #[default]
    AllPatches,
    /// Divide by the number of masked patches.
    MaskedCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskRatioSchedule {
    Constant { ratio: f64 },
    Linear { start: f64, end: f64, epochs: f64 },
}

impl Default for MaskRatioSchedule {
    fn default() -> Self {
        Self::Constant { ratio: 0.75 }
    }
}

impl MaskRatioSchedule {
    pub fn linear_ramp() -> Self {
        Self::Linear {
            start: 0.65,
            end: 0.85,
            epochs: 15.0,
        }
    }

    pub fn ratio_at(&self, epoch: f64) -> f64 {
        match *self {
            Self::Constant { ratio } => ratio,
            Self::Linear { start, end, epochs } => linear_schedule(epoch, epochs, start, end),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals: &[f64] = match self {
            Self::Constant { ratio } => &[*ratio],
            Self::Linear { start, end, .. } => &[*start, *end],
        };
        if vals.iter().all(|r| *r > 0.0 && *r < 1.0) {
            Ok(())
        } else {
            Err(HarmonyError::Config(format!(
                "mask ratio schedule {self:?} outside (0, 1)"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub targets: TargetNormalization,
    pub normalization: ReconstructionNormalization,
    pub reconstruct_both_globals: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            targets: TargetNormalization::PerPatchStandardize,
            normalization: ReconstructionNormalization::AllPatches,
            reconstruct_both_globals: true,
        }
    }
}

/// Uniformly random subset of exactly `round(r·L)` patches to remove.
pub fn mae_mask(num_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(HarmonyError::InvalidArgument(format!(
            "mask ratio {ratio} outside [0, 1)"
        )));
    }
    let count = (ratio * num_patches as f64).round() as usize;
    if count >= num_patches {
        return Err(HarmonyError::InvalidArgument(format!(
            "ratio {ratio} masks all {num_patches} patches"
        )));
    }
    let mut mask = vec![false; num_patches];
    for i in sample(rng, num_patches, count) {
        mask[i] = true;
    }
    Ok(MaskPlan::from_mask(mask, ratio, MaskStyle::Random))
}

pub fn normalize_patch_targets(patches: &Tensor, mode: TargetNormalization) -> Result<Tensor> {
    if patches.cols() == 0 {
        return Err(HarmonyError::InvalidArgument("empty patch".into()));
    }
    let mut out = patches.clone();
    let n = patches.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        match mode {
            TargetNormalization::PerPatchStandardize => {
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-6).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            }
            TargetNormalization::L2Literal => {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
            }
            TargetNormalization::None => {}
        }
    }
    Ok(out)
}

/// Per-patch mean squared error at masked patches, summed and divided by
/// `L` (or by the masked count), then averaged over the images in `plans`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    predictions: Var,
    targets: &Tensor,
    plans: &[MaskPlan],
    norm: ReconstructionNormalization,
) -> Result<Var> {
    let rows: usize = plans.iter().map(MaskPlan::len).sum();
    if tape.value(predictions).shape() != targets.shape() || targets.rows() != rows {
        return Err(HarmonyError::Shape(format!(
            "reconstruction: predictions {:?}, targets {:?}, {rows} mask positions",
            tape.value(predictions).shape(),
            targets.shape()
        )));
    }
    let b = plans.len() as f64;
    let mut weights = Vec::with_capacity(rows);
    for p in plans {
        let denom = match norm {
            ReconstructionNormalization::AllPatches => p.len(),
            ReconstructionNormalization::MaskedCount => p.count(),
        };
        let w = if denom == 0 { 0.0 } else { 1.0 / (denom as f64 * b) };
        weights.extend(p.mask.iter().map(|&m| if m { w } else { 0.0 }));
    }
    tape.weighted_squared_error(predictions, targets.clone(), weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = mae_mask(16, 0.75, &mut rng).unwrap();
        assert_eq!((p.count(), p.kept_indices().len()), (12, 4));
        assert_eq!(mae_mask(16, 0.01, &mut rng).unwrap().count(), 0);
        assert!(mae_mask(4, 0.9, &mut rng).is_err());
        let a = mae_mask(16, 0.75, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = mae_mask(16, 0.75, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_normalization() {
        let c = normalize_patch_targets(&Tensor::full(1, 6, 0.4), TargetNormalization::PerPatchStandardize).unwrap();
        assert!(c.data().iter().all(|&x| x.abs() < 1e-6));
        let l2 = normalize_patch_targets(
            &Tensor::from_rows(&[&[1.0, -1.0, 1.0, -1.0]]),
            TargetNormalization::L2Literal,
        )
        .unwrap();
        assert_eq!(l2.data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn loss_oracle_one_of_four() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::full(4, 3, 1.0));
        let targets = Tensor::zeros(4, 3);
        let plan = [MaskPlan::from_mask(
            vec![false, true, false, false],
            0.25,
            MaskStyle::Random,
        )];
        let l = reconstruction_loss(
            &mut tape,
            pred,
            &targets,
            &plan,
            ReconstructionNormalization::AllPatches,
        )
        .unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
        let m = reconstruction_loss(
            &mut tape,
            pred,
            &targets,
            &plan,
            ReconstructionNormalization::MaskedCount,
        )
        .unwrap();
        assert!((tape.value(m).item() - 1.0).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        let gp = g.var(pred).unwrap();
        assert!(gp.row(0).iter().all(|&x| x == 0.0));
        assert!(gp.row(1).iter().all(|&x| x != 0.0));
    }

    #[test]
    fn ratio_schedules() {
        assert_eq!(MaskRatioSchedule::default().ratio_at(100.0), 0.75);
        let lin = MaskRatioSchedule::linear_ramp();
        assert_eq!(lin.ratio_at(0.0), 0.65);
        assert_eq!(lin.ratio_at(15.0), 0.85);
        assert_eq!(lin.ratio_at(40.0), 0.85);
        assert!((lin.ratio_at(7.5) - 0.75).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn standardized_patches_have_zero_mean_unit_var(vals in proptest::collection::vec(0.0f64..1.0, 12)) {
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 0.2);
            let t = Tensor::from_vec(1, 12, vals).unwrap();
            let s = normalize_patch_targets(&t, TargetNormalization::PerPatchStandardize).unwrap();
            let mean = s.sum() / 12.0;
            let var = s.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 12.0;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }

        #[test]
        fn unmasked_predictions_do_not_matter(noise in -3.0f64..3.0) {
            let plan = [MaskPlan::from_mask(vec![true, false, true, false], 0.5, MaskStyle::Random)];
            let targets = Tensor::from_rows(&[&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6], &[0.7, 0.8]]);
            let run = |n: f64| {
                let mut tape = Tape::new();
                let p = tape.leaf(Tensor::from_rows(&[&[0.0, 0.0], &[n, n], &[1.0, 1.0], &[-n, 2.0 * n]]));
                let l = reconstruction_loss(&mut tape, p, &targets, &plan, ReconstructionNormalization::AllPatches).unwrap();
                tape.value(l).item()
            };
            prop_assert_eq!(run(0.0), run(noise));
        }
    }
}
