//! The single JSON document describing a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentRecipe, MaeViewPolicy};
use crate::baselines::MaskClipConfig;
use crate::contrastive::ContrastiveConfig;
use crate::data::{caption_tokenizer, DataConfig};
use crate::encoders::ModelConfig;
use crate::error::{HarmonyError, Result};
use crate::evaluation::EvalConfig;
use crate::feature_distill::DistillConfig;
use crate::optim::OptimizerConfig;
use crate::reconstruction::ReconstructionConfig;
use crate::schedule::ScheduleConfig;

/// Which training objective set a run optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Harmony,
    ClipOnly,
    MaskClip,
}

/// Multipliers of the distillation, reconstruction, masked-word and
/// word-distillation terms; the contrastive term always has weight 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ones()
    }
}

impl LossWeights {
    pub fn ones() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }

    pub fn zeros() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in [self.alpha, self.beta, self.gamma, self.delta] {
            if !w.is_finite() || w < 0.0 {
                return Err(HarmonyError::Config(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Image view used by the contrastive objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipView {
    #[default]
    Global1,
    StandardAug,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub mask_prob: f64,
    pub student_temp: f64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.2,
            student_temp: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_view: ClipView,
    pub mae_view: MaeViewPolicy,
    /// Save a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: Option<usize>,
    /// Batches prepared ahead of the optimizer in non-deterministic mode.
    pub prefetch_depth: usize,
    /// Stop after this many optimizer steps, regardless of `epochs`.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            clip_view: ClipView::Global1,
            mae_view: MaeViewPolicy::BothGlobals,
            checkpoint_every: Some(10),
            prefetch_depth: 2,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub mode: Mode,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub distill: DistillConfig,
    pub reconstruction: ReconstructionConfig,
    pub text: TextConfig,
    pub augment: AugmentRecipe,
    pub maskclip: MaskClipConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarmonyError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarmonyError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.contrastive.validate()?;
        self.distill.validate()?;
        self.augment.validate()?;
        self.maskclip.validate()?;
        self.eval.validate()?;
        let m = &self.model;
        if self.data.image_size != m.image_size {
            return Err(HarmonyError::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.data.image_size, m.image_size
            )));
        }
        if self.data.context_length != m.context_length {
            return Err(HarmonyError::Config(
                "data.context_length differs from model.context_length".into(),
            ));
        }
        if self.augment.local_size != m.local_size {
            return Err(HarmonyError::Config(
                "augment.local_size differs from model.local_size".into(),
            ));
        }
        if let Some(g) = self.augment.global_size {
            if g != m.image_size {
                return Err(HarmonyError::Config(
                    "augment.global_size must equal model.image_size".into(),
                ));
            }
        }
        if self.distill.local_crops != self.augment.local_crops {
            return Err(HarmonyError::Config(
                "distill.local_crops differs from augment.local_crops".into(),
            ));
        }
        let vocab = caption_tokenizer(m.context_length)?.vocab_size();
        if m.vocab_size < vocab {
            return Err(HarmonyError::Config(format!(
                "model.vocab_size {} smaller than the caption vocabulary ({vocab})",
                m.vocab_size
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(HarmonyError::Config("epochs and batch_size must be > 0".into()));
        }
        if self.train.batch_size > self.data.n_samples {
            return Err(HarmonyError::Config("batch_size exceeds n_samples".into()));
        }
        if !(0.0..=1.0).contains(&self.text.mask_prob) || !(self.text.student_temp > 0.0) {
            return Err(HarmonyError::Config("invalid text objective settings".into()));
        }
        Ok(())
    }

    /// Small settings that keep every objective active and train in
    /// seconds; used by tests and the book.
    pub fn tiny() -> Self {
        let model = ModelConfig {
            vision_layers: 1,
            vision_dim: 32,
            vision_heads: 2,
            text_layers: 1,
            text_dim: 32,
            text_heads: 2,
            context_length: 16,
            vision_decoder_layers: 1,
            vision_decoder_dim: 32,
            vision_decoder_heads: 2,
            text_decoder_layers: 1,
            text_decoder_dim: 32,
            text_decoder_heads: 2,
            head_output_dim: 32,
            head_hidden_dim: 32,
            head_bottleneck_dim: 16,
            maskclip_decoder_heads: 4,
            ..ModelConfig::default()
        };
        Self {
            data: DataConfig {
                n_samples: 64,
                context_length: 16,
                ..DataConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 16,
                checkpoint_every: None,
                ..TrainConfig::default()
            },
            augment: AugmentRecipe {
                local_crops: 2,
                ..AugmentRecipe::default()
            },
            distill: DistillConfig {
                local_crops: 2,
                ..DistillConfig::default()
            },
            eval: EvalConfig {
                samples: 32,
                probe_epochs: 20,
                ..EvalConfig::default()
            },
            model,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_tiny_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = RunConfig::tiny();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"patch_size": 5}}"#).is_err());
        let partial = RunConfig::from_json(r#"{"seed": 7, "weights": {"alpha": 0.5}}"#).unwrap();
        assert_eq!(
            (partial.seed, partial.weights.alpha, partial.weights.beta),
            (7, 0.5, 1.0)
        );
    }
}
