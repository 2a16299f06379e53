//! CLIP-only and MaskCLIP training objectives and the ablation runner.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{LossWeights, Mode, RunConfig};
use crate::contrastive::hard_infonce;
use crate::data::Dataset;
use crate::encoders::{project_contrastive, EncoderBundle, MaskMode, Networks};
use crate::error::{HarmonyError, Result};
use crate::evaluation::evaluate;
use crate::feature_distill::{masked_distribution_loss, weighted_ce, MaskedNormalization};
use crate::mask::MaskPlan;
use crate::params::ParamStore;
use crate::schedule::ScheduleState;
use crate::teacher::TeacherState;
use crate::tensor::Tensor;
use crate::text::mlm_loss;
use crate::trainer::{inverse_temperature, LossVars, PreparedBatch, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskClipConfig {
    /// Fraction of patches removed from the student input.
    pub mask_ratio: f64,
    pub distill_weight: f64,
    pub mlm_weight: f64,
    /// Weight of the optional CLS-level objective.
    pub cls_weight: f64,
    /// Scale range of the single minimal-augmentation crop.
    pub crop_scale: (f64, f64),
    /// Project through the distillation head before the softmax; otherwise
    /// the softmax runs over raw encoder features.
    pub ibot_head: bool,
    pub cls_objective: bool,
    pub centering: bool,
    pub student_temp: f64,
}

impl Default for MaskClipConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            distill_weight: 0.05,
            mlm_weight: 0.05,
            cls_weight: 0.05,
            crop_scale: (0.6, 1.0),
            ibot_head: true,
            cls_objective: false,
            centering: true,
            student_temp: 0.1,
        }
    }
}

impl MaskClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(HarmonyError::Config("maskclip.mask_ratio must lie in (0, 1)".into()));
        }
        for w in [self.distill_weight, self.mlm_weight, self.cls_weight] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(HarmonyError::Config("maskclip weights must be finite and >= 0".into()));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(HarmonyError::Config(
                "maskclip.crop_scale must satisfy 0 < lo <= hi <= 1".into(),
            ));
        }
        if !(self.student_temp > 0.0) {
            return Err(HarmonyError::Config("maskclip.student_temp must be positive".into()));
        }
        Ok(())
    }
}

/// Hard InfoNCE on the contrastive view and the caption; nothing else.
pub fn clip_only_losses(
    tape: &mut Tape,
    nets: &Networks,
    store: &ParamStore,
    prep: &PreparedBatch,
) -> Result<LossVars> {
    let inv_temp = inverse_temperature(tape, nets, store);
    let vt = nets
        .vision
        .encode(tape, store, &prep.clip_images, None, MaskMode::Full)?;
    let cls = vt.cls(tape)?;
    let v = project_contrastive(tape, store, &nets.clip_vision_head, cls)?;
    let tt = nets.text.encode(tape, store, &prep.tokens)?;
    let t = project_contrastive(tape, store, &nets.clip_text_head, tt.pooled.expect("text pooled"))?;
    let hard = hard_infonce(tape, v.values, t.values, inv_temp)?;
    Ok(LossVars::only_contrastive(hard))
}

/// Mean cross-entropy over masked positions between teacher
/// distributions on the full view and student logits decoded from the
/// masked view.
pub fn maskclip_distill_loss(
    tape: &mut Tape,
    teacher_probs: &Tensor,
    student_logits: Var,
    plans: &[MaskPlan],
    tau_s: f64,
) -> Result<Var> {
    if plans.iter().all(|p| p.count() == 0) {
        return Err(HarmonyError::InvalidArgument(
            "masked distillation needs at least one masked patch".into(),
        ));
    }
    masked_distribution_loss(
        tape,
        teacher_probs,
        student_logits,
        plans,
        tau_s,
        MaskedNormalization::MaskedCount,
    )
}

/// Distribution width of the MaskCLIP targets.
pub fn maskclip_output_dim(cfg: &RunConfig) -> usize {
    if cfg.maskclip.ibot_head {
        cfg.model.head_output_dim
    } else {
        cfg.model.vision_dim
    }
}

pub fn maskclip_teacher_state(cfg: &RunConfig) -> TeacherState {
    TeacherState::new(
        maskclip_output_dim(cfg),
        cfg.distill.center_momentum,
        cfg.maskclip.centering,
    )
}

#[derive(Clone, Debug, Default)]
pub struct MaskClipTargets {
    pub patch_probs: Option<Tensor>,
    pub cls_probs: Option<Tensor>,
}

fn head_or_identity(tape: &mut Tape, cfg: &RunConfig, nets: &Networks, store: &ParamStore, x: Var) -> Result<Var> {
    if cfg.maskclip.ibot_head {
        nets.vision_distill_head.forward(tape, store, x)
    } else {
        Ok(x)
    }
}

/// Teacher distributions on the unmasked view.
pub fn maskclip_teacher_targets(
    cfg: &RunConfig,
    bundle: &EncoderBundle,
    centers: &mut TeacherState,
    prep: &PreparedBatch,
    sched: &ScheduleState,
) -> Result<MaskClipTargets> {
    let nets = &bundle.nets;
    let store = &bundle.teacher;
    let mut tape = Tape::no_grad();
    let tok = nets
        .vision
        .encode(&mut tape, store, &prep.clip_images, None, MaskMode::Full)?;
    let mut out = MaskClipTargets::default();
    if cfg.maskclip.distill_weight > 0.0 {
        let p = tok.patches(&mut tape)?;
        let p = head_or_identity(&mut tape, cfg, nets, store, p)?;
        let centered = centers.patch_center.center_and_update(tape.value(p))?;
        out.patch_probs = Some(centered.softmax_rows(sched.teacher_temp));
    }
    if cfg.maskclip.cls_objective && cfg.maskclip.cls_weight > 0.0 {
        let c = tok.cls(&mut tape)?;
        let c = head_or_identity(&mut tape, cfg, nets, store, c)?;
        let centered = centers.cls_center.center_and_update(tape.value(c))?;
        out.cls_probs = Some(centered.softmax_rows(cfg.distill.teacher_temp_cls));
    }
    Ok(out)
}

/// Contrastive loss on the full view plus weighted masked distillation,
/// optional CLS distillation and masked language modeling.
pub fn maskclip_losses(
    tape: &mut Tape,
    cfg: &RunConfig,
    nets: &Networks,
    store: &ParamStore,
    prep: &PreparedBatch,
    targets: &MaskClipTargets,
) -> Result<LossVars> {
    let mc = &cfg.maskclip;
    let mut vars = clip_only_losses(tape, nets, store, prep)?;
    let mut terms = vec![(1.0, vars.hard)];
    let masks = prep
        .mae_masks
        .first()
        .ok_or_else(|| HarmonyError::InvalidArgument("MaskCLIP batch carries no patch masks".into()))?;
    let need_masked = targets.patch_probs.is_some() || targets.cls_probs.is_some();
    if need_masked {
        let tok = nets
            .vision
            .encode(tape, store, &prep.clip_images, Some(masks), MaskMode::DropMasked)?;
        if let Some(teacher) = &targets.patch_probs {
            let decoded = nets
                .maskclip_decoder
                .decode_patches(tape, store, &tok, cfg.model.num_patches())?;
            let logits = head_or_identity(tape, cfg, nets, store, decoded)?;
            let d = maskclip_distill_loss(tape, teacher, logits, masks, mc.student_temp)?;
            vars.mask_distill = Some(d);
            terms.push((mc.distill_weight, d));
        }
        if let Some(teacher) = &targets.cls_probs {
            let c = tok.cls(tape)?;
            let logits = head_or_identity(tape, cfg, nets, store, c)?;
            let b = prep.batch_size();
            let cls = weighted_ce(
                tape,
                teacher.clone(),
                logits,
                cfg.distill.student_temp_cls,
                vec![1.0 / b as f64; b],
            )?;
            vars.cls = Some(cls);
            terms.push((mc.cls_weight, cls));
        }
    }
    if mc.mlm_weight > 0.0 {
        let (masked, plans) = prep
            .masked_tokens
            .as_ref()
            .ok_or_else(|| HarmonyError::InvalidArgument("MaskCLIP batch carries no masked captions".into()))?;
        let mt = nets.text.encode(tape, store, masked)?;
        let logits = nets.text_decoder.decode_words(tape, store, &mt)?;
        let m = mlm_loss(tape, logits, &prep.tokens.ids, plans)?;
        vars.mlm = Some(m);
        terms.push((mc.mlm_weight, m));
    }
    if terms.len() > 1 {
        vars.total = tape.weighted_sum(&terms)?;
    }
    Ok(vars)
}

/// One row of an ablation plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub label: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "LossWeights::zeros")]
    pub weights: LossWeights,
    /// Use teacher soft targets (scheduled `α_c`); otherwise `α_c ≡ 1`.
    #[serde(default)]
    pub soft_targets: bool,
}

impl AblationRow {
    fn harmony(label: &str, alpha: f64, beta: f64, gamma: f64, delta: f64, soft: bool) -> Self {
        Self {
            label: label.into(),
            mode: Mode::Harmony,
            weights: LossWeights {
                alpha,
                beta,
                gamma,
                delta,
            },
            soft_targets: soft,
        }
    }

    /// Applies the row to a base configuration.
    pub fn configure(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode;
        cfg.weights = self.weights.clone();
        if !self.soft_targets {
            cfg.schedule.alpha_c_start = 1.0;
            cfg.schedule.alpha_c_end = 1.0;
        }
        cfg
    }
}

/// Build-up plan: CLIP, then feature distillation, soft targets and pixel
/// reconstruction added cumulatively; the text objectives added to plain
/// CLIP; then everything.
pub fn standard_plan() -> Vec<AblationRow> {
    vec![
        AblationRow {
            label: "CLIP".into(),
            mode: Mode::ClipOnly,
            weights: LossWeights::zeros(),
            soft_targets: false,
        },
        AblationRow::harmony("+L_D", 1.0, 0.0, 0.0, 0.0, false),
        AblationRow::harmony("+L_Soft", 1.0, 0.0, 0.0, 0.0, true),
        AblationRow::harmony("+L_R", 1.0, 1.0, 0.0, 0.0, true),
        AblationRow::harmony("+L_M", 0.0, 0.0, 1.0, 0.0, false),
        AblationRow::harmony("+L_TD", 0.0, 0.0, 1.0, 1.0, false),
        AblationRow::harmony("=L_H", 1.0, 1.0, 1.0, 1.0, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub zero_shot: Option<f64>,
    pub linear: Option<f64>,
    pub seconds: f64,
    pub peak_tape_bytes: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    /// Error message when the row failed.
    pub failure: Option<String>,
}

pub const ABLATION_CSV_HEADER: &str = "label,zero_shot,linear,seconds,peak_tape_bytes,steps,final_loss,failure";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationResult]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let failure = r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
        s.push_str(&format!(
            "{},{},{},{:.3},{},{},{},{}\n",
            r.label,
            opt(r.zero_shot),
            opt(r.linear),
            r.seconds,
            r.peak_tape_bytes,
            r.steps,
            opt(r.final_loss),
            failure
        ));
    }
    s
}

fn run_row(row: &AblationRow, base: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<AblationResult> {
    let cfg = row.configure(base);
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), data.clone())?;
    let summary = trainer.train(out_dir)?;
    let report = evaluate(&trainer.state.bundle, data, &cfg.data, &cfg.eval, trainer.state.step)?;
    report.write(out_dir)?;
    Ok(AblationResult {
        label: row.label.clone(),
        zero_shot: Some(report.zero_shot),
        linear: Some(report.linear_probe.best_accuracy),
        seconds: started.elapsed().as_secs_f64(),
        peak_tape_bytes: summary.history.iter().map(|b| b.tape_bytes).max().unwrap_or(0),
        steps: trainer.state.step,
        final_loss: summary.history.last().map(|b| b.total),
        failure: None,
    })
}

/// Trains and evaluates every row in order under the shared seed and data.
/// A failing row is recorded with its error and the remaining rows still
/// run. Writes `ablation.csv` into `out_dir`, with per-row outputs in
/// numbered subdirectories.
pub fn run_ablation(
    plan: &[AblationRow],
    base: &RunConfig,
    data: &Dataset,
    out_dir: &Path,
) -> Result<Vec<AblationResult>> {
    if plan.is_empty() {
        return Err(HarmonyError::Config("ablation plan is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| HarmonyError::io(out_dir, e))?;
    let mut results = Vec::with_capacity(plan.len());
    for (i, row) in plan.iter().enumerate() {
        let dir = out_dir.join(format!("{i:02}"));
        let started = Instant::now();
        let r = run_row(row, base, data, &dir).unwrap_or_else(|e| AblationResult {
            label: row.label.clone(),
            zero_shot: None,
            linear: None,
            seconds: started.elapsed().as_secs_f64(),
            peak_tape_bytes: 0,
            steps: 0,
            final_loss: None,
            failure: Some(e.to_string()),
        });
        results.push(r);
        let csv = out_dir.join("ablation.csv");
        fs::write(&csv, ablation_csv(&results)).map_err(|e| HarmonyError::io(&csv, e))?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_masked_one_hot_vs_uniform_is_ln2() {
        let mut tape = Tape::new();
        let teacher = Tensor::from_rows(&[&[1.0, 0.0], &[0.3, 0.7]]);
        let s = tape.leaf(Tensor::from_rows(&[&[0.0, 0.0], &[5.0, -5.0]]));
        let plans = [MaskPlan::from_mask(
            vec![true, false],
            0.5,
            crate::mask::MaskStyle::Random,
        )];
        let l = maskclip_distill_loss(&mut tape, &teacher, s, &plans, 1.0).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unmasked_positions_do_not_matter() {
        let plans = [MaskPlan::from_mask(
            vec![true, false],
            0.5,
            crate::mask::MaskStyle::Random,
        )];
        let teacher = Tensor::from_rows(&[&[0.2, 0.8], &[0.5, 0.5]]);
        let eval = |other: f64| {
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::from_rows(&[&[0.4, -0.1], &[other, -other]]));
            let l = maskclip_distill_loss(&mut tape, &teacher, s, &plans, 0.1).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(0.0), eval(9.0));
    }

    #[test]
    fn equal_distributions_give_entropy() {
        let p = [0.2, 0.3, 0.5];
        let logits: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_rows(&[&logits]));
        let plans = [MaskPlan::from_mask(vec![true], 1.0, crate::mask::MaskStyle::Random)];
        let l = maskclip_distill_loss(&mut tape, &Tensor::from_rows(&[&p]), s, &plans, 1.0).unwrap();
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((tape.value(l).item() - h).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(2, 2));
        let plans = [MaskPlan::empty(2)];
        assert!(maskclip_distill_loss(&mut tape, &Tensor::full(2, 2, 0.5), s, &plans, 1.0).is_err());
    }

    #[test]
    fn standard_plan_order_and_parse() {
        let labels: Vec<String> = standard_plan().into_iter().map(|r| r.label).collect();
        assert_eq!(labels, ["CLIP", "+L_D", "+L_Soft", "+L_R", "+L_M", "+L_TD", "=L_H"]);
        let json = serde_json::to_string(&standard_plan()).unwrap();
        let back: Vec<AblationRow> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, standard_plan());
        let minimal: Vec<AblationRow> = serde_json::from_str(r#"[{"label": "CLIP"}]"#).unwrap();
        assert_eq!(minimal[0].weights, LossWeights::zeros());
    }

    #[test]
    fn defaults_follow_the_reproduction_recipe() {
        let c = MaskClipConfig::default();
        assert_eq!((c.mask_ratio, c.distill_weight, c.mlm_weight), (0.75, 0.05, 0.05));
        assert_eq!(c.crop_scale, (0.6, 1.0));
        assert!(c.ibot_head && !c.cls_objective && c.centering);
        c.validate().unwrap();
    }
}
