//! Central finite-difference checks of every loss against the tape's
//! analytic gradients on a micro model.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::baselines::{maskclip_losses, maskclip_teacher_state, maskclip_teacher_targets, MaskClipTargets};
use crate::config::{LossWeights, Mode, RunConfig};
use crate::encoders::{EncoderBundle, ModelConfig, TokenBatch};
use crate::error::{HarmonyError, Result};
use crate::image::Image;
use crate::mask::{MaskPlan, MaskStyle};
use crate::params::{ParamId, ParamStore};
use crate::rng::{purpose, stream};
use crate::schedule::ScheduleState;
use crate::teacher::TeacherState;
use crate::tensor::Tensor;
use crate::text::{BOS, EOS, MASK, PAD};
use crate::trainer::{harmony_losses, harmony_teacher_targets, LossVars, PreparedBatch, TeacherTargets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Finite-difference step.
    pub h: f64,
    /// Entries sampled per parameter tensor (all entries if smaller).
    pub entries_per_param: usize,
    /// Norms below this floor count as zero in the relative error.
    pub norm_floor: f64,
    pub per_loss_tolerance: f64,
    pub end_to_end_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            h: 1e-5,
            entries_per_param: 6,
            norm_floor: 1e-5,
            per_loss_tolerance: 1e-4,
            end_to_end_tolerance: 1e-3,
        }
    }
}

/// Worst-case agreement of one loss with finite differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub component: String,
    pub max_relative_error: f64,
    pub worst_param: String,
    pub tolerance: f64,
    pub params_checked: usize,
    pub entries_checked: usize,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(LossCheck::passed)
    }

    pub fn get(&self, component: &str) -> Option<&LossCheck> {
        self.checks.iter().find(|c| c.component == component)
    }
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

/// Micro model: 8x8 images in 2x2 patches of 4 pixels, 4x4 local crops,
/// `K = 4`, vocabulary 8, context 6.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        local_size: 4,
        vision_layers: 1,
        vision_dim: 8,
        vision_heads: 2,
        text_layers: 1,
        text_dim: 8,
        text_heads: 2,
        context_length: 6,
        vocab_size: 8,
        vision_decoder_layers: 1,
        vision_decoder_dim: 8,
        vision_decoder_heads: 2,
        text_decoder_layers: 1,
        text_decoder_dim: 8,
        text_decoder_heads: 2,
        head_output_dim: 4,
        head_hidden_dim: 8,
        head_bottleneck_dim: 4,
        contrastive_dim: None,
        maskclip_decoder_heads: 2,
        init_temperature: 0.07,
    }
}

/// Run settings for the micro model. Not meant for the data pipeline, so
/// the usual cross-checks against the caption vocabulary do not apply.
pub fn micro_config(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig {
        mode,
        model: micro_model(),
        weights: LossWeights::ones(),
        ..RunConfig::default()
    };
    cfg.augment.local_crops = 1;
    cfg.distill.local_crops = 1;
    cfg.maskclip.cls_objective = true;
    cfg
}

fn random_images(n: usize, size: usize, rng: &mut impl Rng) -> Vec<Image> {
    (0..n)
        .map(|_| {
            let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
            Image::from_data(size, size, data).expect("sized")
        })
        .collect()
}

fn plan(mask: &[bool], style: MaskStyle) -> MaskPlan {
    let ratio = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    MaskPlan::from_mask(mask.to_vec(), ratio, style)
}

/// A two-sample batch with every view and mask the losses consume. Drop
/// masks leave two of the four patches visible.
pub fn micro_batch(model: &ModelConfig, seed: u64) -> PreparedBatch {
    let mut rng = stream(seed, &[purpose::GRADCHECK]);
    let n = 2;
    let s = model.image_size;
    let c = model.context_length;
    let mut ids = Vec::new();
    for _ in 0..n {
        let mut row = vec![PAD; c];
        row[0] = BOS;
        for v in row.iter_mut().take(4).skip(1) {
            *v = rng.random_range(MASK + 1..model.vocab_size as u32);
        }
        row[4] = EOS;
        ids.push(row);
    }
    let tokens = TokenBatch {
        ids,
        eos_positions: vec![4; n],
    };
    let text_plans = vec![
        plan(&[false, true, false, true, false, false], MaskStyle::Bernoulli),
        plan(&[false, false, true, false, false, false], MaskStyle::Bernoulli),
    ];
    let masked_ids = tokens
        .ids
        .iter()
        .zip(&text_plans)
        .map(|(row, p)| {
            row.iter()
                .zip(&p.mask)
                .map(|(&t, &m)| if m { MASK } else { t })
                .collect()
        })
        .collect();
    let g1 = random_images(n, s, &mut rng);
    let g2 = random_images(n, s, &mut rng);
    let blocks = [
        vec![
            plan(&[true, false, false, false], MaskStyle::Blockwise),
            plan(&[true, true, false, false], MaskStyle::Blockwise),
        ],
        vec![
            plan(&[false, false, false, false], MaskStyle::Blockwise),
            plan(&[false, true, false, true], MaskStyle::Blockwise),
        ],
    ];
    let drop = vec![
        plan(&[true, false, true, false], MaskStyle::Random),
        plan(&[false, true, true, false], MaskStyle::Random),
    ];
    PreparedBatch {
        step: 0,
        indices: (0..n).collect(),
        tokens: tokens.clone(),
        clip_images: g1.clone(),
        clip_masks: None,
        globals: Some([g1.clone(), g2.clone()]),
        block_masks: Some(blocks),
        locals: random_images(n, model.local_size, &mut rng),
        mae_views: vec![g1, g2],
        mae_masks: vec![drop.clone(), drop],
        masked_tokens: Some((
            TokenBatch {
                ids: masked_ids,
                eos_positions: tokens.eos_positions,
            },
            text_plans,
        )),
    }
}

/// Schedule values with soft targets active.
pub fn micro_schedule() -> ScheduleState {
    ScheduleState {
        step: 0,
        epoch: 0.0,
        lr: 0.0,
        weight_decay: 0.0,
        alpha_c: 0.5,
        teacher_temp: 0.07,
        momentum: 0.996,
        mask_ratio: 0.5,
    }
}

/// Perturbs the teacher so its targets differ from the student's outputs.
fn perturbed_teacher(bundle: &mut EncoderBundle, seed: u64) {
    let mut rng = stream(seed, &[purpose::GRADCHECK, 1]);
    let ids: Vec<ParamId> = bundle.teacher.ids().collect();
    for id in ids {
        for v in bundle.teacher.get_mut(id).data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
}

/// Named loss handles of one forward pass.
fn named(vars: &LossVars, total_name: &'static str) -> Vec<(&'static str, Var)> {
    let mut out = vec![("hard", vars.hard)];
    let optional = [
        ("soft", vars.soft),
        ("cls", vars.cls),
        ("mim", vars.mim),
        ("reconstruction", vars.reconstruction),
        ("mlm", vars.mlm),
        ("text_distill", vars.text_distill),
        ("mask_distill", vars.mask_distill),
    ];
    out.extend(optional.into_iter().filter_map(|(n, v)| v.map(|v| (n, v))));
    out.push((total_name, vars.total));
    out
}

/// Compares analytic gradients of every named loss with central
/// differences over sampled entries of every parameter tensor.
fn check_all<F>(store: &ParamStore, cfg: &GradcheckConfig, end_to_end: &str, forward: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Vec<(&'static str, Var)>>,
{
    let mut tape = Tape::new();
    let losses = forward(&mut tape, store)?;
    let analytic: Vec<_> = losses
        .iter()
        .map(|&(_, v)| tape.backward(v).map(|g| g.into_params()))
        .collect::<Result<_>>()?;
    drop(tape);

    let mut rng = stream(cfg.seed, &[purpose::GRADCHECK, 2]);
    let mut work = store.clone();
    // per loss, per param: (analytic, numeric) over sampled entries
    let k = losses.len();
    let mut pairs: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); k];
    let mut entries = 0;
    for id in store.ids() {
        let len = store.get(id).len();
        let picks = if len <= cfg.entries_per_param {
            (0..len).collect::<Vec<_>>()
        } else {
            sample(&mut rng, len, cfg.entries_per_param).into_vec()
        };
        let mut per_loss = vec![(Vec::new(), Vec::new()); k];
        for &e in &picks {
            let orig = store.get(id).data()[e];
            let mut eval = |x: f64| -> Result<Vec<f64>> {
                work.get_mut(id).data_mut()[e] = x;
                let mut t = Tape::no_grad();
                let vals = forward(&mut t, &work)?;
                Ok(vals.iter().map(|&(_, v)| t.value(v).item()).collect())
            };
            let plus = eval(orig + cfg.h)?;
            let minus = eval(orig - cfg.h)?;
            work.get_mut(id).data_mut()[e] = orig;
            for l in 0..k {
                let a = analytic[l].get(&id).map_or(0.0, |g| g.data()[e]);
                per_loss[l].0.push(a);
                per_loss[l].1.push((plus[l] - minus[l]) / (2.0 * cfg.h));
            }
            entries += 1;
        }
        for (l, p) in per_loss.into_iter().enumerate() {
            pairs[l].push(p);
        }
    }

    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    let checks = losses
        .iter()
        .zip(pairs)
        .map(|(&(name, _), groups)| {
            let (worst, err) = groups
                .iter()
                .enumerate()
                .map(|(i, (a, n))| (i, relative_error(a, n, cfg.norm_floor)))
                .fold((0, 0.0f64), |best, cur| if cur.1 > best.1 { cur } else { best });
            LossCheck {
                component: name.to_string(),
                max_relative_error: err,
                worst_param: names[worst].clone(),
                tolerance: if name == end_to_end {
                    cfg.end_to_end_tolerance
                } else {
                    cfg.per_loss_tolerance
                },
                params_checked: groups.len(),
                entries_checked: entries,
            }
        })
        .collect();
    Ok(GradcheckReport { checks })
}

/// Checks the seven objectives and the weighted total on the micro model.
pub fn gradcheck_harmony(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let run = micro_config(Mode::Harmony);
    let mut bundle = EncoderBundle::new(run.model.clone(), cfg.seed)?;
    perturbed_teacher(&mut bundle, cfg.seed);
    let prep = micro_batch(&run.model, cfg.seed);
    let sched = micro_schedule();
    let mut centers = TeacherState::new(
        run.model.head_output_dim,
        run.distill.center_momentum,
        run.distill.centering,
    );
    let targets: TeacherTargets = harmony_teacher_targets(&run, &bundle, &mut centers, &prep, &sched)?;
    let nets = bundle.nets.clone();
    check_all(&bundle.student, cfg, "total", |tape, store| {
        let vars = harmony_losses(tape, &run, &nets, store, &prep, &targets, &sched)?;
        Ok(named(&vars, "total"))
    })
}

/// Checks the MaskCLIP objectives (masked distillation, optional CLS
/// distillation, masked language modeling) and their weighted total.
pub fn gradcheck_maskclip(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let run = micro_config(Mode::MaskClip);
    let mut bundle = EncoderBundle::new(run.model.clone(), cfg.seed)?;
    perturbed_teacher(&mut bundle, cfg.seed);
    let mut prep = micro_batch(&run.model, cfg.seed);
    prep.mae_masks.truncate(1);
    let sched = micro_schedule();
    let mut centers = maskclip_teacher_state(&run);
    let targets: MaskClipTargets = maskclip_teacher_targets(&run, &bundle, &mut centers, &prep, &sched)?;
    let nets = bundle.nets.clone();
    check_all(&bundle.student, cfg, "maskclip_total", |tape, store| {
        let vars = maskclip_losses(tape, &run, &nets, store, &prep, &targets)?;
        Ok(named(&vars, "maskclip_total"))
    })
}

/// Both suites, concatenated.
pub fn gradcheck_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut a = gradcheck_harmony(cfg)?;
    let b = gradcheck_maskclip(cfg)?;
    a.checks.extend(b.checks.into_iter().filter(|c| c.component != "hard"));
    if a.checks.is_empty() {
        return Err(HarmonyError::InvalidArgument("no losses were checked".into()));
    }
    Ok(a)
}

/// Finite differences of a scalar function of one tensor; handy for
/// checking individual tape operations.
pub fn numeric_gradient(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.rows(), x.cols());
    let mut work = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        work.data_mut()[i] = orig + h;
        let p = f(&work);
        work.data_mut()[i] = orig - h;
        let m = f(&work);
        work.data_mut()[i] = orig;
        g.data_mut()[i] = (p - m) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0], 1e-6), 0.0);
        assert!((relative_error(&[2.0, 0.0], &[1.0, 0.0], 1e-6) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0], 1e-6), 0.0);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let x = Tensor::from_rows(&[&[1.0, -2.0]]);
        let g = numeric_gradient(&x, 1e-5, |t| t.sum_sq());
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8 && (g.get(0, 1) + 4.0).abs() < 1e-8);
    }

    #[test]
    fn micro_batch_shapes() {
        let m = micro_model();
        m.validate().unwrap();
        let b = micro_batch(&m, 0);
        assert_eq!(b.locals.len(), 2);
        assert!(b.mae_masks.iter().flatten().all(|p| p.len() - p.count() == 2));
    }
}
