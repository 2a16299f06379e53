//! Joint contrastive, self-distillation and masked-modeling pretraining of
//! small vision-language transformers.

// Negated comparisons are deliberate: they reject NaN along with the bad range.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod augment;
pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod feature_distill;
pub mod gradcheck;
pub mod image;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod params;
pub mod reconstruction;
pub mod rng;
pub mod schedule;
pub mod teacher;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{HarmonyError, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    pub mod contrastive {}
    #[doc = include_str!("../../../book/src/masking.md")]
    pub mod masking {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
}
