//! Image–text contrastive objectives with hard and teacher-generated soft
//! targets, and optional patch masking on the contrastive image path.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{HarmonyError, Result};
use crate::mask::{MaskPlan, MaskStyle};
use crate::tensor::Tensor;

/// Upper bound on the learnable logit scale `1/τ`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMasking {
    #[default]
    None,
    Random50,
    Attentive50,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Temperature of the teacher similarity softmax.
    pub teacher_temperature: f64,
    /// Apply a second (unit-temperature) softmax to the teacher targets.
    pub double_softmax: bool,
    pub masking: ClipMasking,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            teacher_temperature: 0.1,
            double_softmax: false,
            masking: ClipMasking::None,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.teacher_temperature > 0.0) {
            return Err(HarmonyError::Config(
                "contrastive teacher temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Row-stochastic targets for both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    pub image_to_text: Tensor,
    pub text_to_image: Tensor,
}

fn check_pair(tape: &Tape, v: Var, t: Var) -> Result<usize> {
    let (vs, ts) = (tape.value(v).shape(), tape.value(t).shape());
    if vs != ts {
        return Err(HarmonyError::Shape(format!("image embeddings {vs:?} vs text {ts:?}")));
    }
    if vs.0 == 0 {
        return Err(HarmonyError::InvalidArgument("contrastive batch is empty".into()));
    }
    Ok(vs.0)
}

/// Similarity logits `V·Tᵀ / τ` where `inv_temp` is a `1 x 1` variable.
fn logits(tape: &mut Tape, v: Var, t: Var, inv_temp: Var) -> Result<Var> {
    let sims = tape.matmul_nt(v, t)?;
    if !tape.value(sims).is_finite() {
        return Err(HarmonyError::NonFinite {
            component: "contrastive similarity".into(),
            step: 0,
        });
    }
    tape.scale_by(sims, inv_temp)
}

fn both_directions(tape: &mut Tape, z: Var, a_v: Tensor, a_t: Tensor) -> Result<Var> {
    let n = tape.value(z).rows();
    let w = vec![1.0 / n as f64; n];
    let lv = tape.soft_cross_entropy(z, a_v, w.clone())?;
    let zt = tape.transpose(z);
    let lt = tape.soft_cross_entropy(zt, a_t, w)?;
    tape.add(lv, lt)
}

/// Symmetric InfoNCE with the pairing identity as targets.
pub fn hard_infonce(tape: &mut Tape, v: Var, t: Var, inv_temp: Var) -> Result<Var> {
    let n = check_pair(tape, v, t)?;
    let z = logits(tape, v, t, inv_temp)?;
    both_directions(tape, z, Tensor::identity(n), Tensor::identity(n))
}

/// Teacher similarity softmax at temperature `tau_bar`.
pub fn soft_targets(v_bar: &Tensor, t_bar: &Tensor, tau_bar: f64, double_softmax: bool) -> Result<SoftTargets> {
    if v_bar.shape() != t_bar.shape() {
        return Err(HarmonyError::Shape(format!(
            "teacher embeddings {:?} vs {:?}",
            v_bar.shape(),
            t_bar.shape()
        )));
    }
    if !(tau_bar > 0.0) {
        return Err(HarmonyError::InvalidArgument(format!("teacher temperature {tau_bar}")));
    }
    let sims = v_bar.matmul_nt(t_bar)?;
    let mut a_v = sims.softmax_rows(tau_bar);
    let mut a_t = sims.transpose().softmax_rows(tau_bar);
    if double_softmax {
        a_v = a_v.softmax_rows(1.0);
        a_t = a_t.softmax_rows(1.0);
    }
    Ok(SoftTargets {
        image_to_text: a_v,
        text_to_image: a_t,
    })
}

fn ensure_stochastic(a: &Tensor, n: usize) -> Result<()> {
    if a.shape() != (n, n) {
        return Err(HarmonyError::Shape(format!("targets {:?} for batch {n}", a.shape())));
    }
    for r in 0..n {
        let row = a.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(HarmonyError::InvalidArgument(format!(
                "target row {r} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// InfoNCE against soft row-stochastic targets.
pub fn soft_infonce(tape: &mut Tape, v: Var, t: Var, targets: &SoftTargets, inv_temp: Var) -> Result<Var> {
    let n = check_pair(tape, v, t)?;
    ensure_stochastic(&targets.image_to_text, n)?;
    ensure_stochastic(&targets.text_to_image, n)?;
    let z = logits(tape, v, t, inv_temp)?;
    both_directions(tape, z, targets.image_to_text.clone(), targets.text_to_image.clone())
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveParts {
    pub total: Var,
    pub hard: Var,
    /// Absent when `α_c = 1` and no soft targets were needed.
    pub soft: Option<Var>,
}

/// `α_c · L_Hard + (1 − α_c) · L_Soft`. At `α_c = 1` the soft term is not
/// evaluated and the result is the hard loss itself.
pub fn contrastive_loss(
    tape: &mut Tape,
    v: Var,
    t: Var,
    targets: Option<&SoftTargets>,
    alpha_c: f64,
    inv_temp: Var,
) -> Result<ContrastiveParts> {
    if !(0.0..=1.0).contains(&alpha_c) {
        return Err(HarmonyError::InvalidArgument(format!(
            "alpha_c {alpha_c} outside [0, 1]"
        )));
    }
    let hard = hard_infonce(tape, v, t, inv_temp)?;
    if alpha_c == 1.0 {
        return Ok(ContrastiveParts {
            total: hard,
            hard,
            soft: None,
        });
    }
    let targets =
        targets.ok_or_else(|| HarmonyError::InvalidArgument("alpha_c < 1 requires teacher soft targets".into()))?;
    let soft = soft_infonce(tape, v, t, targets, inv_temp)?;
    let total = if alpha_c == 0.0 {
        soft
    } else {
        tape.weighted_sum(&[(alpha_c, hard), (1.0 - alpha_c, soft)])?
    };
    Ok(ContrastiveParts {
        total,
        hard,
        soft: Some(soft),
    })
}

/// Patch mask for the contrastive image path. Half of the patches
/// (rounded down) are dropped; attentive masking keeps the patches with the
/// highest teacher CLS attention, ties going to the lower index.
pub fn clip_image_masking(
    num_patches: usize,
    policy: ClipMasking,
    attention: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    let drop = num_patches / 2;
    match policy {
        ClipMasking::None => Ok(MaskPlan::empty(num_patches)),
        ClipMasking::Random50 => {
            let mut mask = vec![false; num_patches];
            for i in sample(rng, num_patches, drop) {
                mask[i] = true;
            }
            Ok(MaskPlan::from_mask(mask, 0.5, MaskStyle::Random))
        }
        ClipMasking::Attentive50 => {
            let att = attention
                .ok_or_else(|| HarmonyError::InvalidArgument("attentive masking needs teacher CLS attention".into()))?;
            if att.len() != num_patches {
                return Err(HarmonyError::Shape(format!(
                    "{} attention weights for {num_patches} patches",
                    att.len()
                )));
            }
            let mut order: Vec<usize> = (0..num_patches).collect();
            order.sort_by(|&a, &b| att[b].total_cmp(&att[a]).then(a.cmp(&b)));
            let mut mask = vec![true; num_patches];
            for &i in &order[..num_patches - drop] {
                mask[i] = false;
            }
            Ok(MaskPlan::from_mask(mask, 0.5, MaskStyle::Attentive))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orth() -> Tensor {
        Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])
    }

    fn eval(f: impl FnOnce(&mut Tape, Var, Var, Var) -> Result<Var>, v: Tensor, t: Tensor, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let (v, t) = (tape.leaf(v), tape.leaf(t));
        let s = tape.leaf(Tensor::scalar(1.0 / tau));
        let out = f(&mut tape, v, t, s).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn hard_oracle_two_orthogonal_pairs() {
        // each row: -ln(e / (e + 1)); two rows averaged, two directions summed
        let row = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let got = eval(hard_infonce, orth(), orth(), 1.0);
        assert!((got - 2.0 * row).abs() < 1e-12);
        assert!((got - 0.62652).abs() < 1e-4);
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let v = Tensor::from_rows(&[&[0.6, 0.8]]);
        assert_eq!(eval(hard_infonce, v.clone(), v, 0.07), 0.0);
    }

    #[test]
    fn soft_oracle_uniform_targets() {
        let a = SoftTargets {
            image_to_text: Tensor::full(2, 2, 0.5),
            text_to_image: Tensor::full(2, 2, 0.5),
        };
        let lse = (1f64.exp() + 1.0).ln();
        let row = 0.5 * (lse - 1.0) + 0.5 * lse;
        let got = eval(|tp, v, t, s| soft_infonce(tp, v, t, &a, s), orth(), orth(), 1.0);
        assert!((got - 2.0 * row).abs() < 1e-12);
        assert!((got - 1.62652).abs() < 1e-4);
        let blend = eval(
            |tp, v, t, s| Ok(contrastive_loss(tp, v, t, Some(&a), 0.5, s)?.total),
            orth(),
            orth(),
            1.0,
        );
        assert!((blend - 1.12652).abs() < 1e-4);
    }

    #[test]
    fn soft_targets_oracles() {
        let a = soft_targets(&orth(), &orth(), 1.0, false).unwrap();
        let e = 1f64.exp();
        assert!((a.image_to_text.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        let same = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let u = soft_targets(&same, &same, 0.1, false).unwrap();
        assert!(u.image_to_text.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        let sharp = soft_targets(&orth(), &orth(), 1e-3, false).unwrap();
        assert!((sharp.image_to_text.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_soft_targets_equal_hard() {
        let v = Tensor::from_rows(&[&[0.6, 0.8], &[1.0, 0.0], &[0.0, -1.0]]);
        let t = Tensor::from_rows(&[&[0.8, 0.6], &[0.0, 1.0], &[-0.6, -0.8]]);
        let a = SoftTargets {
            image_to_text: Tensor::identity(3),
            text_to_image: Tensor::identity(3),
        };
        let h = eval(hard_infonce, v.clone(), t.clone(), 0.3);
        let s = eval(|tp, v, t, s| soft_infonce(tp, v, t, &a, s), v, t, 0.3);
        assert!((h - s).abs() < 1e-10);
    }

    #[test]
    fn non_stochastic_targets_rejected() {
        let a = SoftTargets {
            image_to_text: Tensor::full(2, 2, 0.6),
            text_to_image: Tensor::full(2, 2, 0.5),
        };
        let mut tape = Tape::new();
        let (v, t) = (tape.leaf(orth()), tape.leaf(orth()));
        let s = tape.leaf(Tensor::scalar(1.0));
        assert!(soft_infonce(&mut tape, v, t, &a, s).is_err());
    }

    #[test]
    fn alpha_one_is_hard_exactly() {
        let mut tape = Tape::new();
        let (v, t) = (tape.leaf(orth()), tape.leaf(orth()));
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = contrastive_loss(&mut tape, v, t, None, 1.0, s).unwrap();
        assert_eq!(p.total, p.hard);
        assert!(p.soft.is_none());
    }

    #[test]
    fn masking_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            clip_image_masking(16, ClipMasking::None, None, &mut rng)
                .unwrap()
                .count(),
            0
        );
        assert_eq!(
            clip_image_masking(16, ClipMasking::Random50, None, &mut rng)
                .unwrap()
                .count(),
            8
        );
        assert!(clip_image_masking(16, ClipMasking::Attentive50, None, &mut rng).is_err());
        let mut att = vec![0.01; 16];
        let hot = [0, 3, 4, 7, 9, 10, 13, 15];
        for &i in &hot {
            att[i] = 0.1;
        }
        let plan = clip_image_masking(16, ClipMasking::Attentive50, Some(&att), &mut rng).unwrap();
        assert_eq!(plan.kept_indices(), hot.to_vec());
    }

    proptest! {
        #[test]
        fn pair_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let gen = |rng: &mut ChaCha8Rng| {
                let d: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(n, 3, d).unwrap().l2_normalize_rows()
            };
            let (v, t) = (gen(&mut rng), gen(&mut rng));
            let perm = [2, 0, 3, 1];
            let a = eval(hard_infonce, v.clone(), t.clone(), 0.2);
            let b = eval(hard_infonce, v.select_rows(&perm), t.select_rows(&perm), 0.2);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn soft_loss_bounded_below_by_target_entropy(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let gen = |rng: &mut ChaCha8Rng| {
                let d: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(n, 4, d).unwrap().l2_normalize_rows()
            };
            let (v, t, vb, tb) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let a = soft_targets(&vb, &tb, 0.1, false).unwrap();
            let ent = |m: &Tensor| -> f64 {
                m.data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>() / n as f64
            };
            let bound = ent(&a.image_to_text) + ent(&a.text_to_image);
            let l = eval(|tp, v, t, s| soft_infonce(tp, v, t, &a, s), v, t, 0.5);
            prop_assert!(l >= bound - 1e-12);
        }
    }
}
