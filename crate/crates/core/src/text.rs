//! Word-level tokenizer, caption masking, masked-word prediction and word
//! distillation.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoders::TokenBatch;
use crate::error::{HarmonyError, Result};
use crate::feature_distill::{masked_distribution_loss, MaskedNormalization};
use crate::mask::{MaskPlan, MaskStyle};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<mask>"];

pub fn is_special(id: u32) -> bool {
    id <= MASK
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// `vocab[id]` is the token string; the first four entries are special.
    pub vocab: Vec<String>,
    pub context_length: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from the special tokens followed by `words` in
    /// first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>, context_length: usize) -> Result<Self> {
        if context_length < 2 {
            return Err(HarmonyError::Tokenizer("context length must fit BOS and EOS".into()));
        }
        let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.to_lowercase();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(HarmonyError::Tokenizer(format!("invalid vocabulary word {w:?}")));
            }
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        Self::from_vocab(vocab, context_length)
    }

    pub fn from_vocab(vocab: Vec<String>, context_length: usize) -> Result<Self> {
        if vocab.len() < SPECIAL_TOKENS.len() || vocab[..4].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(HarmonyError::Tokenizer(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(HarmonyError::Tokenizer(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self {
            vocab,
            context_length,
            index,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// `BOS w₁ … wₙ EOS PAD …`, truncated so EOS always fits; returns the
    /// ids and the EOS position.
    pub fn encode(&self, caption: &str) -> Result<(Vec<u32>, usize)> {
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(BOS);
        for w in caption.split_whitespace() {
            let w = w.to_lowercase();
            let id = self
                .id(&w)
                .ok_or_else(|| HarmonyError::Tokenizer(format!("unknown word {w:?}")))?;
            if ids.len() < self.context_length - 1 {
                ids.push(id);
            }
        }
        let eos = ids.len();
        ids.push(EOS);
        ids.resize(self.context_length, PAD);
        Ok((ids, eos))
    }

    pub fn encode_batch<S: AsRef<str>>(&self, captions: &[S]) -> Result<TokenBatch> {
        let mut ids = Vec::with_capacity(captions.len());
        let mut eos_positions = Vec::with_capacity(captions.len());
        for c in captions {
            let (i, e) = self.encode(c.as_ref())?;
            ids.push(i);
            eos_positions.push(e);
        }
        Ok(TokenBatch { ids, eos_positions })
    }

    /// Words of a token sequence with special tokens skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let w = self
                .vocab
                .get(id as usize)
                .ok_or_else(|| HarmonyError::Tokenizer(format!("token id {id} out of vocabulary")))?;
            if !is_special(id) {
                words.push(w.as_str());
            }
        }
        Ok(words.join(" "))
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_vocab(self.vocab, self.context_length)
    }
}

/// Replaces each non-special token with MASK independently with
/// probability `p`. Words are never swapped for random words or kept.
pub fn mask_caption(tokens: &[u32], p: f64, rng: &mut impl Rng) -> Result<(Vec<u32>, MaskPlan)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(HarmonyError::InvalidArgument(format!("mask probability {p}")));
    }
    let mut out = tokens.to_vec();
    let mut mask = vec![false; tokens.len()];
    for (i, &t) in tokens.iter().enumerate() {
        // draw for every position so the stream does not depend on content
        let hit = rng.random::<f64>() < p;
        if hit && !is_special(t) {
            out[i] = MASK;
            mask[i] = true;
        }
    }
    Ok((out, MaskPlan::from_mask(mask, p, MaskStyle::Bernoulli)))
}

/// Mean cross-entropy of the original ids at masked positions.
pub fn mlm_loss(tape: &mut Tape, logits: Var, originals: &[Vec<u32>], plans: &[MaskPlan]) -> Result<Var> {
    let (rows, vocab) = tape.value(logits).shape();
    let positions: usize = originals.iter().map(Vec::len).sum();
    if originals.len() != plans.len()
        || positions != rows
        || plans.iter().zip(originals).any(|(p, o)| p.len() != o.len())
    {
        return Err(HarmonyError::Shape(format!(
            "mlm: {rows} logit rows for {positions} tokens in {} plans",
            plans.len()
        )));
    }
    let mut targets = Tensor::zeros(rows, vocab);
    let mut r = 0;
    for (plan, orig) in plans.iter().zip(originals) {
        for (&m, &id) in plan.mask.iter().zip(orig) {
            if m {
                if id as usize >= vocab {
                    return Err(HarmonyError::Tokenizer(format!(
                        "token id {id} out of vocabulary of {vocab}"
                    )));
                }
                targets.set(r, id as usize, 1.0);
            }
            r += 1;
        }
    }
    let masked: usize = plans.iter().map(MaskPlan::count).sum();
    if masked == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let w = 1.0 / masked as f64;
    let weights = plans
        .iter()
        .flat_map(|p| p.mask.iter().map(move |&m| if m { w } else { 0.0 }))
        .collect();
    tape.soft_cross_entropy(logits, targets, weights)
}

/// Word-level distillation: teacher distributions on the full caption,
/// student logits on the masked caption, mean CE over masked positions.
pub fn text_distill_loss(
    tape: &mut Tape,
    teacher_probs: &Tensor,
    student_logits: Var,
    plans: &[MaskPlan],
    tau_s: f64,
) -> Result<Var> {
    masked_distribution_loss(
        tape,
        teacher_probs,
        student_logits,
        plans,
        tau_s,
        MaskedNormalization::MaskedCount,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tok() -> Tokenizer {
        Tokenizer::new("a photo of red circle".split(' '), 8).unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = tok();
        let (ids, eos) = t.encode("a photo of a red circle").unwrap();
        assert_eq!(ids, vec![BOS, 4, 5, 6, 4, 7, 8, EOS]);
        assert_eq!(eos, 7);
        assert_eq!(t.decode(&ids).unwrap(), "a photo of a red circle");
        assert!(t.encode("a blue circle").is_err());
    }

    #[test]
    fn truncation_keeps_eos() {
        let t = tok();
        let (ids, eos) = t.encode("a a a a a a a a a a a").unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!((ids[7], eos), (EOS, 7));
    }

    #[test]
    fn masking_extremes_and_specials() {
        let t = tok();
        let (ids, _) = t.encode("red circle").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (same, p0) = mask_caption(&ids, 0.0, &mut rng).unwrap();
        assert_eq!((same, p0.count()), (ids.clone(), 0));
        let (all, p1) = mask_caption(&ids, 1.0, &mut rng).unwrap();
        assert_eq!(p1.masked_indices(), vec![1, 2]);
        assert_eq!(all, vec![BOS, MASK, MASK, EOS, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn mlm_oracles() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(3, 16));
        let orig = vec![vec![1, 9, 2]];
        let none = [MaskPlan::empty(3)];
        let z = mlm_loss(&mut tape, logits, &orig, &none).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let one = [MaskPlan::from_mask(vec![false, true, false], 0.2, MaskStyle::Bernoulli)];
        let l = mlm_loss(&mut tape, logits, &orig, &one).unwrap();
        assert!((tape.value(l).item() - 16f64.ln()).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        let gl = g.var(logits).unwrap();
        assert!(gl.row(0).iter().chain(gl.row(2)).all(|&x| x == 0.0));
        let bad = vec![vec![1, 99, 2]];
        assert!(mlm_loss(&mut tape, logits, &bad, &one).is_err());
    }

    #[test]
    fn text_distill_oracle() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(2, 2));
        let t = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let plan = [MaskPlan::from_mask(vec![true, false], 0.2, MaskStyle::Bernoulli)];
        let l = text_distill_loss(&mut tape, &t, s, &plan, 1.0).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }
}
