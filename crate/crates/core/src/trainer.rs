//! The composite training step, the training loop, metrics and resume.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{mae_view_policy, make_crops, standard_view, AugmentRecipe, MaeViewPolicy};
use crate::autograd::{Tape, Var};
use crate::baselines;
use crate::checkpoint::{self, Checkpoint};
use crate::config::{ClipView, LossWeights, Mode, RunConfig};
use crate::contrastive::{
    clip_image_masking, contrastive_loss, soft_targets, ClipMasking, SoftTargets, MAX_LOGIT_SCALE,
};
use crate::data::{epoch_order, Dataset};
use crate::encoders::{project_contrastive, EncoderBundle, MaskMode, Networks, TokenBatch};
use crate::error::{HarmonyError, Result};
use crate::feature_distill::{blockwise_mask, cls_loss, distill_loss, masked_distribution_loss};
use crate::image::{patchify_batch, Image};
use crate::mask::MaskPlan;
use crate::optim::{clip_gradients, global_norm, AdamW, GradMap};
use crate::params::ParamStore;
use crate::reconstruction::{mae_mask, normalize_patch_targets, reconstruction_loss};
use crate::rng::{purpose, stream};
use crate::schedule::{ScheduleState, Scheduler};
use crate::teacher::{ema_update, maskclip_momentum, TeacherState};
use crate::tensor::Tensor;
use crate::text::{mask_caption, mlm_loss, text_distill_loss};

/// Per-step values of every objective plus the schedule. Components that
/// were not evaluated (zero weight) are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub step: u64,
    pub epoch: f64,
    pub total: f64,
    pub contrastive: f64,
    pub hard: f64,
    pub soft: Option<f64>,
    pub cls: Option<f64>,
    pub mim: Option<f64>,
    pub distill: Option<f64>,
    pub reconstruction: Option<f64>,
    pub mlm: Option<f64>,
    pub text_distill: Option<f64>,
    /// MaskCLIP masked patch distillation.
    pub mask_distill: Option<f64>,
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha_c: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
    pub mask_ratio: f64,
    pub temperature: f64,
    pub grad_norm: f64,
    pub clip_factor: f64,
    /// Bytes held by the autograd tape at the end of the forward pass.
    pub tape_bytes: usize,
}

impl LossBundle {
    /// Component values with their names, for metrics and finiteness checks.
    pub fn components(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("contrastive", Some(self.contrastive)),
            ("hard", Some(self.hard)),
            ("soft", self.soft),
            ("cls", self.cls),
            ("mim", self.mim),
            ("distill", self.distill),
            ("reconstruction", self.reconstruction),
            ("mlm", self.mlm),
            ("text_distill", self.text_distill),
            ("mask_distill", self.mask_distill),
            ("total", Some(self.total)),
        ]
    }
}

/// Everything a step needs that does not depend on network weights:
/// augmented views, masks and tokenized captions.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub step: u64,
    pub indices: Vec<usize>,
    pub tokens: TokenBatch,
    pub clip_images: Vec<Image>,
    pub clip_masks: Option<Vec<MaskPlan>>,
    /// Two global views per sample, view-major.
    pub globals: Option<[Vec<Image>; 2]>,
    pub block_masks: Option<[Vec<MaskPlan>; 2]>,
    /// Local views, view-major: `locals[v * batch + b]`.
    pub locals: Vec<Image>,
    pub mae_views: Vec<Vec<Image>>,
    pub mae_masks: Vec<Vec<MaskPlan>>,
    pub masked_tokens: Option<(TokenBatch, Vec<MaskPlan>)>,
}

impl PreparedBatch {
    pub fn batch_size(&self) -> usize {
        self.indices.len()
    }
}

/// Which pieces of a [`PreparedBatch`] a run consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub distill: bool,
    pub reconstruction: bool,
    pub masked_text: bool,
}

impl Needs {
    pub fn of(cfg: &RunConfig) -> Self {
        match cfg.mode {
            Mode::Harmony => Self {
                distill: cfg.weights.alpha > 0.0,
                reconstruction: cfg.weights.beta > 0.0,
                masked_text: cfg.weights.gamma > 0.0 || cfg.weights.delta > 0.0,
            },
            Mode::ClipOnly => Self {
                distill: false,
                reconstruction: false,
                masked_text: false,
            },
            Mode::MaskClip => Self {
                distill: false,
                reconstruction: false,
                masked_text: cfg.maskclip.mlm_weight > 0.0,
            },
        }
    }
}

/// Builds the weight-independent inputs of step `step` for `indices`.
/// Every random draw comes from a stream keyed by `(step, sample, purpose)`.
pub fn prepare_batch(
    cfg: &RunConfig,
    data: &Dataset,
    scheduler: &Scheduler,
    step: u64,
    indices: &[usize],
) -> Result<PreparedBatch> {
    let needs = Needs::of(cfg);
    let batch = data.batch(indices)?;
    let b = indices.len();
    let seed = cfg.seed;
    let sched = scheduler.state(step);
    let model = &cfg.model;
    let key = |p: u64, i: usize| [p, step, indices[i] as u64];

    let mut clip_images = Vec::with_capacity(b);
    let mut globals: [Vec<Image>; 2] = [Vec::new(), Vec::new()];
    let mut locals_by_sample = Vec::new();
    let mut standards = Vec::new();
    if cfg.mode == Mode::MaskClip {
        for (i, img) in batch.images.iter().enumerate() {
            let mut rng = stream(seed, &key(purpose::CROPS, i));
            let (v, _) = standard_view(
                img,
                cfg.maskclip.crop_scale,
                model.image_size,
                cfg.augment.flip_p,
                &mut rng,
            );
            clip_images.push(v);
        }
    } else {
        let mae_standard = needs.reconstruction && cfg.train.mae_view == MaeViewPolicy::Standard;
        let recipe = AugmentRecipe {
            local_crops: if needs.distill { cfg.augment.local_crops } else { 0 },
            standard_view: cfg.train.clip_view == ClipView::StandardAug || mae_standard,
            ..cfg.augment.clone()
        };
        for (i, img) in batch.images.iter().enumerate() {
            let mut rng = stream(seed, &key(purpose::CROPS, i));
            let crops = make_crops(img, &recipe, &mut rng)?;
            let [g1, g2]: [Image; 2] = crops
                .globals
                .clone()
                .try_into()
                .map_err(|_| HarmonyError::InvalidArgument("expected two global crops".into()))?;
            clip_images.push(match cfg.train.clip_view {
                ClipView::Global1 => g1.clone(),
                ClipView::StandardAug => crops.standard.clone().expect("requested above"),
            });
            if needs.reconstruction && mae_standard {
                standards.push(mae_view_policy(&crops, MaeViewPolicy::Standard)?[0].clone());
            }
            globals[0].push(g1);
            globals[1].push(g2);
            locals_by_sample.push(crops.locals);
        }
    }

    let clip_masks = match cfg.contrastive.masking {
        ClipMasking::Random50 if cfg.mode != Mode::MaskClip => Some(
            (0..b)
                .map(|i| {
                    clip_image_masking(
                        model.num_patches(),
                        ClipMasking::Random50,
                        None,
                        &mut stream(seed, &key(purpose::CLIP_MASK, i)),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };

    let grid = (model.grid(), model.grid());
    let (block_masks, locals) = if needs.distill {
        let mut masks: [Vec<MaskPlan>; 2] = [Vec::with_capacity(b), Vec::with_capacity(b)];
        for i in 0..b {
            let mut rng = stream(seed, &key(purpose::CLS_MASK, i));
            for m in masks.iter_mut() {
                let ratio = cfg.distill.sample_pred_ratio(&mut rng);
                m.push(blockwise_mask(grid, ratio, &mut rng)?);
            }
        }
        let nl = cfg.augment.local_crops;
        let mut locals = Vec::with_capacity(nl * b);
        for v in 0..nl {
            for sample in &locals_by_sample {
                locals.push(sample[v].clone());
            }
        }
        (Some(masks), locals)
    } else {
        (None, Vec::new())
    };

    let (mae_views, mae_masks) = if cfg.mode == Mode::MaskClip {
        let masks = (0..b)
            .map(|i| {
                mae_mask(
                    model.num_patches(),
                    cfg.maskclip.mask_ratio,
                    &mut stream(seed, &key(purpose::MAE_MASK, i)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        (Vec::new(), vec![masks])
    } else if needs.reconstruction {
        let views: Vec<Vec<Image>> = match cfg.train.mae_view {
            MaeViewPolicy::BothGlobals => globals.to_vec(),
            MaeViewPolicy::Standard => vec![standards],
        };
        let mut masks = vec![Vec::with_capacity(b); views.len()];
        for i in 0..b {
            let mut rng = stream(seed, &key(purpose::MAE_MASK, i));
            for m in masks.iter_mut() {
                m.push(mae_mask(model.num_patches(), sched.mask_ratio, &mut rng)?);
            }
        }
        (views, masks)
    } else {
        (Vec::new(), Vec::new())
    };

    let masked_tokens = if needs.masked_text {
        let mut ids = Vec::with_capacity(b);
        let mut plans = Vec::with_capacity(b);
        for (i, row) in batch.tokens.ids.iter().enumerate() {
            let (m, p) = mask_caption(
                row,
                cfg.text.mask_prob,
                &mut stream(seed, &key(purpose::CAPTION_MASK, i)),
            )?;
            ids.push(m);
            plans.push(p);
        }
        Some((
            TokenBatch {
                ids,
                eos_positions: batch.tokens.eos_positions.clone(),
            },
            plans,
        ))
    } else {
        None
    };

    Ok(PreparedBatch {
        step,
        indices: indices.to_vec(),
        tokens: batch.tokens,
        clip_images,
        clip_masks,
        globals: needs.distill.then_some(globals),
        block_masks,
        locals,
        mae_views,
        mae_masks,
        masked_tokens,
    })
}

/// Teacher outputs consumed as constant targets by the student losses.
#[derive(Clone, Debug, Default)]
pub struct TeacherTargets {
    pub cls_probs: Option<Vec<Tensor>>,
    pub patch_probs: Option<Tensor>,
    pub soft: Option<SoftTargets>,
    pub text_probs: Option<Tensor>,
    /// Attentive contrastive masks, which depend on teacher attention.
    pub clip_masks: Option<Vec<MaskPlan>>,
}

/// Runs the teacher networks (no gradient) and updates the centers.
pub fn harmony_teacher_targets(
    cfg: &RunConfig,
    bundle: &EncoderBundle,
    centers: &mut TeacherState,
    prep: &PreparedBatch,
    sched: &ScheduleState,
) -> Result<TeacherTargets> {
    let nets = &bundle.nets;
    let store = &bundle.teacher;
    let needs = Needs::of(cfg);
    let mut out = TeacherTargets::default();
    let mut tape = Tape::no_grad();

    if cfg.contrastive.masking == ClipMasking::Attentive50 {
        let masks = prep
            .clip_images
            .iter()
            .map(|img| {
                let att = nets.vision.cls_attention(store, img)?;
                clip_image_masking(att.len(), ClipMasking::Attentive50, Some(&att), &mut stream(0, &[]))
            })
            .collect::<Result<Vec<_>>>()?;
        out.clip_masks = Some(masks);
    }

    if needs.distill {
        let globals = prep.globals.as_ref().expect("prepared with distill");
        let masks = prep.block_masks.as_ref().expect("prepared with distill");
        let literal = cfg.distill.teacher_sees_masked_view;
        let mut cls = Vec::with_capacity(2);
        let mut patches = Vec::with_capacity(2);
        for g in 0..2 {
            let (m, mode) = if literal {
                (Some(masks[g].as_slice()), MaskMode::SubstituteMaskToken)
            } else {
                (None, MaskMode::Full)
            };
            let tok = nets.vision.encode(&mut tape, store, &globals[g], m, mode)?;
            let c = tok.cls(&mut tape)?;
            let c = nets.vision_distill_head.forward(&mut tape, store, c)?;
            cls.push(tape.value(c).clone());
            let p = tok.patches(&mut tape)?;
            let p = nets.vision_distill_head.forward(&mut tape, store, p)?;
            patches.push(tape.value(p).clone());
        }
        // one center update per step over both views
        let all_cls = centers
            .cls_center
            .center_and_update(&Tensor::vstack(&[&cls[0], &cls[1]])?)?;
        let b = prep.batch_size();
        out.cls_probs = Some(
            (0..2)
                .map(|g| {
                    all_cls
                        .select_rows(&(g * b..(g + 1) * b).collect::<Vec<_>>())
                        .softmax_rows(cfg.distill.teacher_temp_cls)
                })
                .collect(),
        );
        let all_patch = centers
            .patch_center
            .center_and_update(&Tensor::vstack(&[&patches[0], &patches[1]])?)?;
        out.patch_probs = Some(all_patch.softmax_rows(sched.teacher_temp));
    }

    if sched.alpha_c < 1.0 {
        let vt = nets
            .vision
            .encode(&mut tape, store, &prep.clip_images, None, MaskMode::Full)?;
        let c = vt.cls(&mut tape)?;
        let v = project_contrastive(&mut tape, store, &nets.clip_vision_head, c)?;
        let tt = nets.text.encode(&mut tape, store, &prep.tokens)?;
        let t = project_contrastive(&mut tape, store, &nets.clip_text_head, tt.pooled.expect("text pooled"))?;
        out.soft = Some(soft_targets(
            tape.value(v.values),
            tape.value(t.values),
            cfg.contrastive.teacher_temperature,
            cfg.contrastive.double_softmax,
        )?);
    }

    if cfg.mode == Mode::Harmony && cfg.weights.delta > 0.0 {
        let tokens = if cfg.distill.teacher_sees_masked_view {
            &prep.masked_tokens.as_ref().expect("prepared with masked text").0
        } else {
            &prep.tokens
        };
        let tt = nets.text.encode(&mut tape, store, tokens)?;
        let h = nets.text_distill_head.forward(&mut tape, store, tt.hidden)?;
        let centered = centers.text_center.center_and_update(tape.value(h))?;
        out.text_probs = Some(centered.softmax_rows(sched.teacher_temp));
    }
    Ok(out)
}

/// Tape handles of every evaluated objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub contrastive: Var,
    pub hard: Var,
    pub soft: Option<Var>,
    pub cls: Option<Var>,
    pub mim: Option<Var>,
    pub distill: Option<Var>,
    pub reconstruction: Option<Var>,
    pub mlm: Option<Var>,
    pub text_distill: Option<Var>,
    pub mask_distill: Option<Var>,
}

impl LossVars {
    pub fn only_contrastive(hard: Var) -> Self {
        Self {
            total: hard,
            contrastive: hard,
            hard,
            soft: None,
            cls: None,
            mim: None,
            distill: None,
            reconstruction: None,
            mlm: None,
            text_distill: None,
            mask_distill: None,
        }
    }
}

/// `1/τ` as a tape variable from the student's log-scale parameter.
pub fn inverse_temperature(tape: &mut Tape, nets: &Networks, store: &ParamStore) -> Var {
    let ls = tape.param(store, nets.logit_scale);
    tape.exp(ls)
}

/// Student forward for every enabled objective and their weighted sum.
pub fn harmony_losses(
    tape: &mut Tape,
    cfg: &RunConfig,
    nets: &Networks,
    store: &ParamStore,
    prep: &PreparedBatch,
    targets: &TeacherTargets,
    sched: &ScheduleState,
) -> Result<LossVars> {
    let w = &cfg.weights;
    let needs = Needs::of(cfg);
    let inv_temp = inverse_temperature(tape, nets, store);

    let clip_masks = targets.clip_masks.as_ref().or(prep.clip_masks.as_ref());
    let vt = nets.vision.encode(
        tape,
        store,
        &prep.clip_images,
        clip_masks.map(Vec::as_slice),
        MaskMode::DropMasked,
    )?;
    let vcls = vt.cls(tape)?;
    let v = project_contrastive(tape, store, &nets.clip_vision_head, vcls)?;
    let tt = nets.text.encode(tape, store, &prep.tokens)?;
    let t = project_contrastive(tape, store, &nets.clip_text_head, tt.pooled.expect("text pooled"))?;
    let c = contrastive_loss(tape, v.values, t.values, targets.soft.as_ref(), sched.alpha_c, inv_temp)?;

    let mut vars = LossVars {
        total: c.total,
        contrastive: c.total,
        hard: c.hard,
        soft: c.soft,
        ..LossVars::only_contrastive(c.total)
    };
    let mut terms = vec![(1.0, c.total)];

    if needs.distill {
        let globals = prep.globals.as_ref().expect("prepared with distill");
        let masks = prep.block_masks.as_ref().expect("prepared with distill");
        let head = &nets.vision_distill_head;
        let literal = cfg.distill.teacher_sees_masked_view;
        let mut views = Vec::with_capacity(2 + cfg.augment.local_crops);
        let mut patch_logits = Vec::with_capacity(2);
        for g in 0..2 {
            let (m, mode) = if literal {
                (None, MaskMode::Full)
            } else {
                (Some(masks[g].as_slice()), MaskMode::SubstituteMaskToken)
            };
            let tok = nets.vision.encode(tape, store, &globals[g], m, mode)?;
            let cls = tok.cls(tape)?;
            views.push(head.forward(tape, store, cls)?);
            let p = tok.patches(tape)?;
            patch_logits.push(head.forward(tape, store, p)?);
        }
        let b = prep.batch_size();
        if !prep.locals.is_empty() {
            let tok = nets.vision.encode(tape, store, &prep.locals, None, MaskMode::Full)?;
            let cls = tok.cls(tape)?;
            let logits = head.forward(tape, store, cls)?;
            for v in 0..prep.locals.len() / b {
                views.push(tape.gather_rows(logits, (v * b..(v + 1) * b).collect())?);
            }
        }
        let teacher_cls = targets.cls_probs.as_ref().expect("teacher cls targets");
        let cls = cls_loss(tape, teacher_cls, &views, cfg.distill.student_temp_cls)?;
        let plans: Vec<MaskPlan> = masks.iter().flatten().cloned().collect();
        let student_patches = tape.concat_rows(&patch_logits)?;
        let mim = masked_distribution_loss(
            tape,
            targets.patch_probs.as_ref().expect("teacher patch targets"),
            student_patches,
            &plans,
            cfg.distill.student_temp_patch,
            cfg.distill.patch_normalization,
        )?;
        let d = distill_loss(tape, cls, mim)?;
        vars.cls = Some(cls);
        vars.mim = Some(mim);
        vars.distill = Some(d);
        terms.push((w.alpha, d));
    }

    if needs.reconstruction {
        let mut per_view = Vec::with_capacity(prep.mae_views.len());
        for (imgs, masks) in prep.mae_views.iter().zip(&prep.mae_masks) {
            let tok = nets
                .vision
                .encode(tape, store, imgs, Some(masks), MaskMode::DropMasked)?;
            let pred = nets.vision_decoder.decode_pixels(tape, store, &tok)?;
            let (patches, _, _) = patchify_batch(imgs, cfg.model.patch_size)?;
            let target = normalize_patch_targets(&patches, cfg.reconstruction.targets)?;
            per_view.push((
                1.0,
                reconstruction_loss(tape, pred, &target, masks, cfg.reconstruction.normalization)?,
            ));
        }
        let r = tape.weighted_sum(&per_view)?;
        vars.reconstruction = Some(r);
        terms.push((w.beta, r));
    }

    if needs.masked_text {
        let (masked, plans) = prep.masked_tokens.as_ref().expect("prepared with masked text");
        let mt = nets.text.encode(tape, store, masked)?;
        if w.gamma > 0.0 {
            let logits = nets.text_decoder.decode_words(tape, store, &mt)?;
            let m = mlm_loss(tape, logits, &prep.tokens.ids, plans)?;
            vars.mlm = Some(m);
            terms.push((w.gamma, m));
        }
        if w.delta > 0.0 {
            let hidden = if cfg.distill.teacher_sees_masked_view {
                tt.hidden
            } else {
                mt.hidden
            };
            let logits = nets.text_distill_head.forward(tape, store, hidden)?;
            let td = text_distill_loss(
                tape,
                targets.text_probs.as_ref().expect("teacher text targets"),
                logits,
                plans,
                cfg.text.student_temp,
            )?;
            vars.text_distill = Some(td);
            terms.push((w.delta, td));
        }
    }

    vars.total = if terms.len() == 1 {
        c.total
    } else {
        tape.weighted_sum(&terms)?
    };
    Ok(vars)
}

/// Model, optimizer and teacher state that together determine a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub bundle: EncoderBundle,
    pub optimizer: AdamW,
    pub teacher: TeacherState,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let bundle = EncoderBundle::new(cfg.model.clone(), cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer.clone(), &bundle.student);
        let teacher = match cfg.mode {
            Mode::MaskClip => baselines::maskclip_teacher_state(cfg),
            _ => TeacherState::new(
                cfg.model.head_output_dim,
                cfg.distill.center_momentum,
                cfg.distill.centering,
            ),
        };
        Ok(Self {
            bundle,
            optimizer,
            teacher,
            step: 0,
        })
    }
}

fn value(tape: &Tape, v: Option<Var>) -> Option<f64> {
    v.map(|v| tape.value(v).item())
}

/// One optimizer step on a prepared batch. Returns the loss bundle; on a
/// non-finite loss nothing is updated and the offending component is named.
pub fn train_step(
    cfg: &RunConfig,
    scheduler: &Scheduler,
    state: &mut TrainState,
    prep: &PreparedBatch,
) -> Result<LossBundle> {
    let step = state.step;
    if prep.step != step {
        return Err(HarmonyError::InvalidArgument(format!(
            "batch prepared for step {} applied at step {step}",
            prep.step
        )));
    }
    let sched = scheduler.state(step);
    let mut tape = Tape::new();
    let bundle = &state.bundle;
    let mut forward = || -> Result<_> {
        Ok(match cfg.mode {
            Mode::Harmony => {
                let targets = harmony_teacher_targets(cfg, bundle, &mut state.teacher, prep, &sched)?;
                let vars = harmony_losses(&mut tape, cfg, &bundle.nets, &bundle.student, prep, &targets, &sched)?;
                (vars, sched.momentum)
            }
            Mode::ClipOnly => {
                let vars = baselines::clip_only_losses(&mut tape, &bundle.nets, &bundle.student, prep)?;
                (vars, sched.momentum)
            }
            Mode::MaskClip => {
                let targets = baselines::maskclip_teacher_targets(cfg, bundle, &mut state.teacher, prep, &sched)?;
                let vars = baselines::maskclip_losses(&mut tape, cfg, &bundle.nets, &bundle.student, prep, &targets)?;
                (
                    vars,
                    maskclip_momentum(step.min(scheduler.total_steps()), scheduler.total_steps())?,
                )
            }
        })
    };
    let (vars, momentum) = forward().map_err(|e| e.at_step(step))?;
    let mut out = LossBundle {
        step,
        epoch: sched.epoch,
        total: tape.value(vars.total).item(),
        contrastive: tape.value(vars.contrastive).item(),
        hard: tape.value(vars.hard).item(),
        soft: value(&tape, vars.soft),
        cls: value(&tape, vars.cls),
        mim: value(&tape, vars.mim),
        distill: value(&tape, vars.distill),
        reconstruction: value(&tape, vars.reconstruction),
        mlm: value(&tape, vars.mlm),
        text_distill: value(&tape, vars.text_distill),
        mask_distill: value(&tape, vars.mask_distill),
        weights: cfg.weights.clone(),
        lr: sched.lr,
        weight_decay: sched.weight_decay,
        alpha_c: sched.alpha_c,
        momentum,
        teacher_temp: sched.teacher_temp,
        mask_ratio: sched.mask_ratio,
        temperature: bundle.temperature(),
        grad_norm: 0.0,
        clip_factor: 1.0,
        tape_bytes: tape.bytes(),
    };
    for (name, v) in out.components() {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(HarmonyError::NonFinite {
                    component: name.to_string(),
                    step,
                });
            }
        }
    }
    let mut grads: GradMap = tape.backward(vars.total)?.into_params();
    out.grad_norm = global_norm(&grads);
    if !out.grad_norm.is_finite() {
        return Err(HarmonyError::NonFinite {
            component: "gradient".into(),
            step,
        });
    }
    if let Some(max) = cfg.optimizer.clip_norm {
        out.clip_factor = clip_gradients(&mut grads, max);
    }
    drop(tape);
    let bundle = &mut state.bundle;
    state
        .optimizer
        .step(&mut bundle.student, &grads, sched.lr, sched.weight_decay)?;
    let ls = bundle.student.get_mut(bundle.nets.logit_scale);
    let clamped = ls.item().min(MAX_LOGIT_SCALE.ln());
    ls.set(0, 0, clamped);
    ema_update(&mut bundle.teacher, &bundle.student, momentum)?;
    state.step += 1;
    Ok(out)
}

/// A training run: configuration, data and mutable state.
pub struct Trainer {
    pub config: RunConfig,
    pub data: Arc<Dataset>,
    pub scheduler: Scheduler,
    pub state: TrainState,
}

/// Worker count from `HARMONY_THREADS` (default: available parallelism).
pub fn thread_budget() -> usize {
    std::env::var("HARMONY_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

impl Trainer {
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if data.len() < config.train.batch_size {
            return Err(HarmonyError::Config(format!(
                "dataset of {} samples is smaller than one batch",
                data.len()
            )));
        }
        if data.tokenizer.vocab_size() > config.model.vocab_size {
            return Err(HarmonyError::Config(
                "dataset vocabulary exceeds model.vocab_size".into(),
            ));
        }
        let steps_per_epoch = data.len() / config.train.batch_size;
        let scheduler = Scheduler::new(
            config.schedule.clone(),
            steps_per_epoch,
            config.train.epochs,
            config.train.batch_size,
        )?;
        let state = TrainState::new(&config)?;
        Ok(Self {
            config,
            data: Arc::new(data),
            scheduler,
            state,
        })
    }

    /// Restores model, optimizer, teacher and step from a checkpoint.
    pub fn resume(config: RunConfig, data: Dataset, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, data)?;
        if ckpt.model != t.config.model {
            return Err(HarmonyError::Checkpoint(
                "checkpoint model config differs from run config".into(),
            ));
        }
        if ckpt.seed != t.config.seed {
            return Err(HarmonyError::Checkpoint(format!(
                "checkpoint seed {} differs from run seed {}",
                ckpt.seed, t.config.seed
            )));
        }
        t.state = ckpt.into_state(t.state)?;
        Ok(t)
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.scheduler.total_steps();
        self.config.train.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        batch_indices(&self.config, &self.scheduler, self.data.len(), step)
    }

    pub fn prepare(&self, step: u64) -> Result<PreparedBatch> {
        prepare_batch(
            &self.config,
            &self.data,
            &self.scheduler,
            step,
            &self.batch_indices(step),
        )
    }

    /// Prepares and applies the next step.
    pub fn step(&mut self) -> Result<LossBundle> {
        let prep = self.prepare(self.state.step)?;
        train_step(&self.config, &self.scheduler, &mut self.state, &prep)
    }

    /// Runs until `until` (exclusive) or the configured end, calling `on_step`
    /// after every step. Batches are prepared on a background thread unless
    /// the run is deterministic or only one thread is allowed.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_step: impl FnMut(&LossBundle, &TrainState) -> Result<()>,
    ) -> Result<()> {
        let end = until.min(self.total_steps());
        let start = self.state.step;
        if start >= end {
            return Ok(());
        }
        let prefetch = !self.config.deterministic && thread_budget() > 1 && self.config.train.prefetch_depth > 0;
        if !prefetch {
            while self.state.step < end {
                let b = self.step()?;
                on_step(&b, &self.state)?;
            }
            return Ok(());
        }
        let (tx, rx) = sync_channel::<Result<PreparedBatch>>(self.config.train.prefetch_depth);
        let cfg = self.config.clone();
        let sch = self.scheduler.clone();
        let data = Arc::clone(&self.data);
        let worker = std::thread::spawn(move || {
            for s in start..end {
                let idx = batch_indices(&cfg, &sch, data.len(), s);
                let p = prepare_batch(&cfg, &data, &sch, s, &idx);
                let failed = p.is_err();
                if tx.send(p).is_err() || failed {
                    break;
                }
            }
        });
        let mut result = Ok(());
        for prep in rx.iter() {
            let r = prep.and_then(|p| {
                let b = train_step(&self.config, &self.scheduler, &mut self.state, &p)?;
                on_step(&b, &self.state)
            });
            if let Err(e) = r {
                result = Err(e);
                break;
            }
            if self.state.step >= end {
                break;
            }
        }
        drop(rx);
        let _ = worker.join();
        result
    }

    /// Full training with metrics JSONL and periodic checkpoints under
    /// `out_dir`. Returns every step's losses.
    pub fn train(&mut self, out_dir: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out_dir).map_err(|e| HarmonyError::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let mut metrics = MetricsWriter::open(&metrics_path, self.state.step == 0)?;
        let spe = self.scheduler.steps_per_epoch as u64;
        let every = self.config.train.checkpoint_every.map(|e| e as u64 * spe);
        let started = Instant::now();
        let mut history = Vec::new();
        let cfg = self.config.clone();
        let end = self.total_steps();
        self.run_until(end, |b, state| {
            metrics.write(b)?;
            if let Some(every) = every {
                if every > 0 && state.step % every == 0 && state.step < end {
                    checkpoint::save(&out_dir.join(format!("checkpoint_{:06}.bin", state.step)), &cfg, state)?;
                }
            }
            history.push(b.clone());
            Ok(())
        })?;
        let final_path = out_dir.join("checkpoint_final.bin");
        checkpoint::save(&final_path, &self.config, &self.state)?;
        Ok(TrainSummary {
            history,
            seconds: started.elapsed().as_secs_f64(),
            final_checkpoint: final_path,
        })
    }
}

pub fn batch_indices(cfg: &RunConfig, scheduler: &Scheduler, n: usize, step: u64) -> Vec<usize> {
    let spe = scheduler.steps_per_epoch as u64;
    let epoch = step / spe;
    let pos = (step % spe) as usize;
    let b = cfg.train.batch_size;
    epoch_order(n, cfg.seed, epoch)[pos * b..(pos + 1) * b].to_vec()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<LossBundle>,
    pub seconds: f64,
    pub final_checkpoint: PathBuf,
}

/// Appends one JSON object per step.
pub struct MetricsWriter {
    file: fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: &Path, truncate: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!truncate)
            .truncate(truncate)
            .open(path)
            .map_err(|e| HarmonyError::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, b: &LossBundle) -> Result<()> {
        let mut line = serde_json::to_vec(b)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| HarmonyError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<LossBundle>> {
    let text = fs::read_to_string(path).map_err(|e| HarmonyError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarmonyError::from))
        .collect()
}
