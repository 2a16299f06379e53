//! Boolean masks over patch or token positions.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    Empty,
    Blockwise,
    Random,
    Attentive,
    Bernoulli,
}

/// `mask[i] == true` marks position `i` as masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    /// Ratio the plan was generated for.
    pub ratio: f64,
    pub style: MaskStyle,
}

impl MaskPlan {
    pub fn empty(len: usize) -> Self {
        Self {
            mask: vec![false; len],
            ratio: 0.0,
            style: MaskStyle::Empty,
        }
    }

    pub fn from_mask(mask: Vec<bool>, ratio: f64, style: MaskStyle) -> Self {
        Self { mask, ratio, style }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }
}
