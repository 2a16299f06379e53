//! Vision and text transformers, decoders and projection heads.
//!
//! All six networks live in one [`ParamStore`] layout. The student store is
//! trained; the teacher store is an exponential moving average of it and is
//! only ever read through a [`Tape::no_grad`] tape, so teacher parameters
//! never receive gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{HarmonyError, Result};
use crate::image::{patchify_batch, Image, CHANNELS};
use crate::mask::MaskPlan;
use crate::nn::{normal, Linear, Transformer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Side length of the small multi-crop views.
    pub local_size: usize,
    pub vision_layers: usize,
    pub vision_dim: usize,
    pub vision_heads: usize,
    pub text_layers: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub vision_decoder_layers: usize,
    pub vision_decoder_dim: usize,
    pub vision_decoder_heads: usize,
    pub text_decoder_layers: usize,
    pub text_decoder_dim: usize,
    pub text_decoder_heads: usize,
    /// Output dimension `K` of the self-distillation heads.
    pub head_output_dim: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    /// Output dimension of the single-layer contrastive projections;
    /// `None` uses the vision width.
    pub contrastive_dim: Option<usize>,
    /// Heads of the one-layer MaskCLIP decoder (which runs at vision width).
    pub maskclip_decoder_heads: usize,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            local_size: 16,
            vision_layers: 4,
            vision_dim: 64,
            vision_heads: 4,
            text_layers: 4,
            text_dim: 64,
            text_heads: 4,
            context_length: 32,
            vocab_size: 64,
            vision_decoder_layers: 2,
            vision_decoder_dim: 64,
            vision_decoder_heads: 4,
            text_decoder_layers: 1,
            text_decoder_dim: 64,
            text_decoder_heads: 4,
            head_output_dim: 256,
            head_hidden_dim: 128,
            head_bottleneck_dim: 64,
            contrastive_dim: None,
            maskclip_decoder_heads: 16,
            init_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    /// Full-size setting at 224 px: a ViT-B vision tower, a CLIP-sized text
    /// tower and an MAE decoder.
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            local_size: 96,
            vision_layers: 12,
            vision_dim: 768,
            vision_heads: 12,
            text_layers: 12,
            text_dim: 512,
            text_heads: 8,
            context_length: 77,
            vocab_size: 49408,
            vision_decoder_layers: 8,
            vision_decoder_dim: 512,
            vision_decoder_heads: 16,
            text_decoder_layers: 4,
            text_decoder_dim: 512,
            text_decoder_heads: 8,
            head_output_dim: 8192,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            contrastive_dim: Some(512),
            maskclip_decoder_heads: 16,
            init_temperature: 0.07,
        }
    }

    pub fn contrastive_dim(&self) -> usize {
        self.contrastive_dim.unwrap_or(self.vision_dim)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarmonyError::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.local_size.is_multiple_of(self.patch_size) || self.local_size == 0 || self.local_size > self.image_size
        {
            return err(format!(
                "local_size {} must be a positive multiple of patch_size and at most image_size",
                self.local_size
            ));
        }
        let dims = [
            ("vision_layers", self.vision_layers),
            ("vision_dim", self.vision_dim),
            ("vision_heads", self.vision_heads),
            ("text_layers", self.text_layers),
            ("text_dim", self.text_dim),
            ("text_heads", self.text_heads),
            ("context_length", self.context_length),
            ("vocab_size", self.vocab_size),
            ("vision_decoder_dim", self.vision_decoder_dim),
            ("vision_decoder_heads", self.vision_decoder_heads),
            ("text_decoder_dim", self.text_decoder_dim),
            ("text_decoder_heads", self.text_decoder_heads),
            ("head_hidden_dim", self.head_hidden_dim),
            ("head_bottleneck_dim", self.head_bottleneck_dim),
            ("contrastive_dim", self.contrastive_dim()),
            ("maskclip_decoder_heads", self.maskclip_decoder_heads),
        ];
        for (name, v) in dims {
            if v == 0 {
                return err(format!("{name} must be > 0"));
            }
        }
        for (name, d, h) in [
            ("vision", self.vision_dim, self.vision_heads),
            ("text", self.text_dim, self.text_heads),
            ("vision_decoder", self.vision_decoder_dim, self.vision_decoder_heads),
            ("text_decoder", self.text_decoder_dim, self.text_decoder_heads),
            ("maskclip_decoder", self.vision_dim, self.maskclip_decoder_heads),
        ] {
            if d % h != 0 {
                return err(format!("{name} dim {d} not divisible by {h} heads"));
            }
        }
        if self.head_output_dim < 2 {
            return err("head_output_dim must be at least 2".into());
        }
        if self.context_length < 2 {
            return err("context_length must hold BOS and EOS".into());
        }
        if !(self.init_temperature > 0.0) {
            return err("init_temperature must be positive".into());
        }
        Ok(())
    }
}

/// How a patch mask is applied by [`VisionEncoder::encode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Mask ignored.
    Full,
    /// Masked patch embeddings replaced by the learned mask token.
    SubstituteMaskToken,
    /// Masked patches removed from the sequence.
    DropMasked,
}

/// Per-token outputs of an encoder for a batch of equal-length sequences,
/// stacked as `(batch * seq) x dim`.
#[derive(Clone, Debug)]
pub struct TokenEmbeddings {
    pub hidden: Var,
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    /// Patch indices kept per sample (drop mode only).
    pub kept: Option<Vec<Vec<usize>>>,
    /// Sentence embeddings, one row per sample (text encoder only).
    pub pooled: Option<Var>,
}

impl TokenEmbeddings {
    /// CLS token rows, `batch x dim`.
    pub fn cls(&self, tape: &mut Tape) -> Result<Var> {
        let idx = (0..self.batch).map(|b| b * self.seq).collect();
        tape.gather_rows(self.hidden, idx)
    }

    /// Patch rows (everything but CLS), `(batch * (seq - 1)) x dim`.
    pub fn patches(&self, tape: &mut Tape) -> Result<Var> {
        let idx = (0..self.batch)
            .flat_map(|b| (1..self.seq).map(move |s| b * self.seq + s))
            .collect();
        tape.gather_rows(self.hidden, idx)
    }
}

/// A batch of unit-normalized embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub values: Var,
    pub rows: usize,
    pub dim: usize,
}

/// Bilinear (half-pixel) resampling weights from a `src x src` grid to a
/// `dst x dst` grid, as a `dst² x src²` matrix.
pub fn interpolation_matrix(src: usize, dst: usize) -> Tensor {
    let axis = |i: usize| -> [(usize, f64); 2] {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let w = pos - lo as f64;
        [(lo, 1.0 - w), (hi, w)]
    };
    let mut m = Tensor::zeros(dst * dst, src * src);
    for y in 0..dst {
        for x in 0..dst {
            for (sy, wy) in axis(y) {
                for (sx, wx) in axis(x) {
                    let r = y * dst + x;
                    let c = sy * src + sx;
                    m.set(r, c, m.get(r, c) + wy * wx);
                }
            }
        }
    }
    m
}

fn tile_rows(tape: &mut Tape, x: Var, times: usize) -> Result<Var> {
    let rows = tape.value(x).rows();
    let idx = (0..times).flat_map(|_| 0..rows).collect();
    tape.gather_rows(x, idx)
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub mask_token: ParamId,
    pub pos_embed: ParamId,
    pub transformer: Transformer,
    pub patch_size: usize,
    pub grid: usize,
    pub dim: usize,
}

impl VisionEncoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.vision_dim;
        Self {
            patch_embed: Linear::new(store, "vision.patch_embed", cfg.patch_dim(), d, true, rng),
            cls_token: store.add("vision.cls_token", normal(1, d, 0.02, rng), true),
            mask_token: store.add("vision.mask_token", Tensor::zeros(1, d), true),
            pos_embed: store.add("vision.pos_embed", normal(1 + cfg.num_patches(), d, 0.02, rng), true),
            transformer: Transformer::new(store, "vision", cfg.vision_layers, d, cfg.vision_heads, rng),
            patch_size: cfg.patch_size,
            grid: cfg.grid(),
            dim: d,
        }
    }

    /// Positional embeddings for a `grid x grid` view: the CLS row and the
    /// patch rows (resampled when the view is smaller than the full image).
    fn positions(&self, tape: &mut Tape, store: &ParamStore, grid: usize) -> Result<(Var, Var)> {
        let pos = tape.param(store, self.pos_embed);
        let cls = tape.gather_rows(pos, vec![0])?;
        let patches = tape.gather_rows(pos, (1..=self.grid * self.grid).collect())?;
        let patches = if grid == self.grid {
            patches
        } else {
            let m = tape.constant(interpolation_matrix(self.grid, grid));
            tape.matmul(m, patches)?
        };
        Ok((cls, patches))
    }

    /// Encodes a batch of equally sized images. `masks`, when given, holds
    /// one plan per image over its patch grid.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &[Image],
        masks: Option<&[MaskPlan]>,
        mode: MaskMode,
    ) -> Result<TokenEmbeddings> {
        let (patches, l, (gh, gw)) = patchify_batch(images, self.patch_size)?;
        if gh != gw || gh > self.grid {
            return Err(HarmonyError::Shape(format!(
                "image grid {gh}x{gw} unsupported by a {0}x{0} encoder",
                self.grid
            )));
        }
        let b = images.len();
        if let Some(m) = masks {
            if m.len() != b || m.iter().any(|p| p.len() != l) {
                return Err(HarmonyError::Shape(format!("expected {b} masks of length {l}")));
            }
        }
        let mode = if masks.is_none() { MaskMode::Full } else { mode };

        let x = tape.constant(patches);
        let mut x = self.patch_embed.forward(tape, store, x)?;
        if mode == MaskMode::SubstituteMaskToken {
            let masks = masks.expect("checked above");
            let token = tape.param(store, self.mask_token);
            let stacked = tape.concat_rows(&[x, token])?;
            let mask_row = b * l;
            let idx = masks
                .iter()
                .enumerate()
                .flat_map(|(i, m)| {
                    m.mask
                        .iter()
                        .enumerate()
                        .map(move |(j, &hit)| if hit { mask_row } else { i * l + j })
                })
                .collect();
            x = tape.gather_rows(stacked, idx)?;
        }
        let (pos_cls, pos_patches) = self.positions(tape, store, gh)?;
        let pos_tiled = tile_rows(tape, pos_patches, b)?;
        x = tape.add(x, pos_tiled)?;

        let mut kept = None;
        let mut keep = l;
        if mode == MaskMode::DropMasked {
            let masks = masks.expect("checked above");
            let lists: Vec<Vec<usize>> = masks.iter().map(MaskPlan::kept_indices).collect();
            keep = lists[0].len();
            if lists.iter().any(|k| k.len() != keep) {
                return Err(HarmonyError::Shape(
                    "drop mode needs the same number of kept patches per image".into(),
                ));
            }
            if keep == 0 {
                return Err(HarmonyError::InvalidArgument(
                    "mask covers every patch; encoder input would be CLS only".into(),
                ));
            }
            let idx = lists
                .iter()
                .enumerate()
                .flat_map(|(i, k)| k.iter().map(move |&j| i * l + j))
                .collect();
            x = tape.gather_rows(x, idx)?;
            kept = Some(lists);
        }

        let cls = tape.param(store, self.cls_token);
        let cls = tape.add(cls, pos_cls)?;
        let stacked = tape.concat_rows(&[cls, x])?;
        let seq = keep + 1;
        let idx = (0..b)
            .flat_map(|i| std::iter::once(0).chain((0..keep).map(move |j| 1 + i * keep + j)))
            .collect();
        let x = tape.gather_rows(stacked, idx)?;
        let hidden = self.transformer.forward(tape, store, x, b, seq, false)?;
        Ok(TokenEmbeddings {
            hidden,
            batch: b,
            seq,
            dim: self.dim,
            kept,
            pooled: None,
        })
    }

    /// Last-layer CLS attention over patches (head-averaged), recomputed from
    /// the final block's input. Used for attentive masking.
    pub fn cls_attention(&self, store: &ParamStore, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let (patches, l, (gh, _)) = patchify_batch(std::slice::from_ref(image), self.patch_size)?;
        let x = tape.constant(patches);
        let x = self.patch_embed.forward(&mut tape, store, x)?;
        let (pos_cls, pos_patches) = self.positions(&mut tape, store, gh)?;
        let x = tape.add(x, pos_patches)?;
        let cls = tape.param(store, self.cls_token);
        let cls = tape.add(cls, pos_cls)?;
        let mut h = tape.concat_rows(&[cls, x])?;
        let seq = l + 1;
        let (last, rest) = self
            .transformer
            .blocks
            .split_last()
            .ok_or_else(|| HarmonyError::Config("vision encoder has no layers".into()))?;
        for blk in rest {
            h = blk.forward(&mut tape, store, h, 1, seq, false)?;
        }
        let n = last.norm1.forward(&mut tape, store, h)?;
        let q = last.q.forward(&mut tape, store, n)?;
        let k = last.k.forward(&mut tape, store, n)?;
        let (qv, kv) = (tape.value(q), tape.value(k));
        let dh = self.dim / last.heads;
        let mut out = vec![0.0; l];
        for head in 0..last.heads {
            let cols = head * dh..(head + 1) * dh;
            let mut scores: Vec<f64> = (0..seq)
                .map(|j| cols.clone().map(|c| qv.get(0, c) * kv.get(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            crate::tensor::softmax_in_place(&mut scores, 1.0);
            for j in 0..l {
                out[j] += scores[j + 1] / last.heads as f64;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub transformer: Transformer,
    pub context_length: usize,
    pub vocab_size: usize,
    pub dim: usize,
}

/// Token ids for a batch of captions, each exactly `context_length` long.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<u32>>,
    /// Position whose embedding is pooled for each caption.
    pub eos_positions: Vec<usize>,
}

impl TextEncoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.text_dim;
        Self {
            token_embed: store.add("text.token_embed", normal(cfg.vocab_size, d, 0.02, rng), true),
            pos_embed: store.add("text.pos_embed", normal(cfg.context_length, d, 0.01, rng), true),
            transformer: Transformer::new(store, "text", cfg.text_layers, d, cfg.text_heads, rng),
            context_length: cfg.context_length,
            vocab_size: cfg.vocab_size,
            dim: d,
        }
    }

    /// Causal text transformer; the pooled embedding is taken at each
    /// caption's end-of-sequence position.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenBatch) -> Result<TokenEmbeddings> {
        let b = tokens.ids.len();
        let c = self.context_length;
        if b == 0 {
            return Err(HarmonyError::InvalidArgument("empty caption batch".into()));
        }
        if tokens.eos_positions.len() != b {
            return Err(HarmonyError::Shape("one EOS position per caption".into()));
        }
        let mut idx = Vec::with_capacity(b * c);
        for row in &tokens.ids {
            if row.len() != c {
                return Err(HarmonyError::Shape(format!(
                    "caption of {} tokens, context length {c}",
                    row.len()
                )));
            }
            for &t in row {
                if t as usize >= self.vocab_size {
                    return Err(HarmonyError::Tokenizer(format!(
                        "token id {t} out of vocabulary of {}",
                        self.vocab_size
                    )));
                }
                idx.push(t as usize);
            }
        }
        let table = tape.param(store, self.token_embed);
        let x = tape.gather_rows(table, idx)?;
        let pos = tape.param(store, self.pos_embed);
        let pos = tile_rows(tape, pos, b)?;
        let x = tape.add(x, pos)?;
        let hidden = self.transformer.forward(tape, store, x, b, c, true)?;
        let pool_idx = tokens
            .eos_positions
            .iter()
            .enumerate()
            .map(|(i, &p)| i * c + p.min(c - 1))
            .collect();
        let pooled = tape.gather_rows(hidden, pool_idx)?;
        Ok(TokenEmbeddings {
            hidden,
            batch: b,
            seq: c,
            dim: self.dim,
            kept: None,
            pooled: Some(pooled),
        })
    }
}

/// Transformer decoder over a full token grid: encoder outputs are optionally
/// re-embedded, dropped positions are refilled with a learned mask token, and
/// positional embeddings are added before the blocks.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    pub embed: Option<Linear>,
    pub mask_token: ParamId,
    pub pos_embed: ParamId,
    pub transformer: Transformer,
    pub dim: usize,
}

impl TokenDecoder {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        positions: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let embed = (in_dim != dim).then(|| Linear::new(store, &format!("{name}.embed"), in_dim, dim, true, rng));
        Self {
            embed,
            mask_token: store.add(format!("{name}.mask_token"), normal(1, dim, 0.02, rng), true),
            pos_embed: store.add(format!("{name}.pos_embed"), normal(positions, dim, 0.02, rng), true),
            transformer: Transformer::new(store, name, layers, dim, heads, rng),
            dim,
        }
    }

    /// Decodes drop-mode encoder output back to `1 + num_patches` positions
    /// per sample; returns the patch rows only, `(batch * L) x dim`.
    pub fn decode_patches(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &TokenEmbeddings,
        num_patches: usize,
    ) -> Result<Var> {
        let kept = tokens
            .kept
            .as_ref()
            .ok_or_else(|| HarmonyError::InvalidArgument("decoder needs kept patch indices".into()))?;
        let b = tokens.batch;
        let k = tokens.seq - 1;
        let mut x = tokens.hidden;
        if let Some(e) = &self.embed {
            x = e.forward(tape, store, x)?;
        }
        let token = tape.param(store, self.mask_token);
        let stacked = tape.concat_rows(&[x, token])?;
        let mask_row = b * tokens.seq;
        let mut idx = Vec::with_capacity(b * (num_patches + 1));
        for (i, list) in kept.iter().enumerate() {
            let base = i * tokens.seq;
            let mut slot = vec![mask_row; num_patches];
            for (rank, &p) in list.iter().enumerate() {
                if p >= num_patches {
                    return Err(HarmonyError::Shape(format!(
                        "kept index {p} out of range for {num_patches} patches"
                    )));
                }
                slot[p] = base + 1 + rank;
            }
            debug_assert_eq!(list.len(), k);
            idx.push(base);
            idx.extend(slot);
        }
        let x = tape.gather_rows(stacked, idx)?;
        let pos = tape.param(store, self.pos_embed);
        let pos = tile_rows(tape, pos, b)?;
        let x = tape.add(x, pos)?;
        let seq = num_patches + 1;
        let h = self.transformer.forward(tape, store, x, b, seq, false)?;
        let patch_idx = (0..b).flat_map(|i| (1..seq).map(move |s| i * seq + s)).collect();
        tape.gather_rows(h, patch_idx)
    }

    /// Runs the blocks over an already complete sequence batch.
    pub fn decode_sequence(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenEmbeddings) -> Result<Var> {
        let mut x = tokens.hidden;
        if let Some(e) = &self.embed {
            x = e.forward(tape, store, x)?;
        }
        let pos = tape.param(store, self.pos_embed);
        let pos = tile_rows(tape, pos, tokens.batch)?;
        let x = tape.add(x, pos)?;
        self.transformer
            .forward(tape, store, x, tokens.batch, tokens.seq, false)
    }
}

/// Pixel decoder: token decoder plus a per-patch pixel regression layer.
#[derive(Clone, Debug)]
pub struct VisionDecoder {
    pub decoder: TokenDecoder,
    pub predict: Linear,
    pub num_patches: usize,
}

impl VisionDecoder {
    /// Per-patch pixel predictions, `(batch * L) x (patch² · 3)`.
    pub fn decode_pixels(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenEmbeddings) -> Result<Var> {
        let h = self.decoder.decode_patches(tape, store, tokens, self.num_patches)?;
        self.predict.forward(tape, store, h)
    }
}

/// Word decoder producing per-position vocabulary logits.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub decoder: TokenDecoder,
    pub predict: Linear,
}

impl TextDecoder {
    pub fn decode_words(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenEmbeddings) -> Result<Var> {
        let h = self.decoder.decode_sequence(tape, store, tokens)?;
        self.predict.forward(tape, store, h)
    }
}

/// MLP projection with an L2-normalized bottleneck and a weight-normalized
/// output layer whose rows are unit-norm direction vectors.
#[derive(Clone, Debug)]
pub struct DistillHead {
    pub layers: Vec<Linear>,
    pub last_direction: ParamId,
    pub output_dim: usize,
}

impl DistillHead {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let hid = cfg.head_hidden_dim;
        let bot = cfg.head_bottleneck_dim;
        let layers = vec![
            Linear::new(store, &format!("{name}.mlp.0"), in_dim, hid, true, rng),
            Linear::new(store, &format!("{name}.mlp.1"), hid, hid, true, rng),
            Linear::new(store, &format!("{name}.mlp.2"), hid, bot, true, rng),
        ];
        let last_direction = store.add(
            format!("{name}.last.direction"),
            normal(cfg.head_output_dim, bot, 1.0, rng).l2_normalize_rows(),
            true,
        );
        Self {
            layers,
            last_direction,
            output_dim: cfg.head_output_dim,
        }
    }

    /// Raw `K`-dimensional logits for every input row.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if i + 1 < n {
                h = tape.gelu(h);
            }
        }
        let h = tape.l2_normalize_rows(h);
        let dir = tape.param(store, self.last_direction);
        let w = tape.l2_normalize_rows(dir);
        tape.matmul_nt(h, w)
    }

    /// The effective output weight (direction rows scaled to unit norm).
    pub fn effective_last_layer(&self, store: &ParamStore) -> Tensor {
        store.get(self.last_direction).l2_normalize_rows()
    }
}

#[derive(Clone, Debug)]
pub struct Networks {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub vision_decoder: VisionDecoder,
    pub text_decoder: TextDecoder,
    pub clip_vision_head: Linear,
    pub clip_text_head: Linear,
    /// Shared by the CLS and patch-level objectives.
    pub vision_distill_head: DistillHead,
    pub text_distill_head: DistillHead,
    pub maskclip_decoder: TokenDecoder,
    /// `ln(1/τ)` of the contrastive softmax.
    pub logit_scale: ParamId,
}

/// The student and teacher parameter stores with the network layout that
/// addresses both.
#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub config: ModelConfig,
    pub nets: Networks,
    pub student: ParamStore,
    pub teacher: ParamStore,
}

impl EncoderBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let vision = VisionEncoder::new(&mut store, cfg, &mut rng);
        let text = TextEncoder::new(&mut store, cfg, &mut rng);
        let vision_decoder = VisionDecoder {
            decoder: TokenDecoder::new(
                &mut store,
                "vision_decoder",
                cfg.vision_dim,
                cfg.vision_decoder_dim,
                cfg.vision_decoder_layers,
                cfg.vision_decoder_heads,
                1 + cfg.num_patches(),
                &mut rng,
            ),
            predict: Linear::new(
                &mut store,
                "vision_decoder.predict",
                cfg.vision_decoder_dim,
                cfg.patch_dim(),
                true,
                &mut rng,
            ),
            num_patches: cfg.num_patches(),
        };
        let text_decoder = TextDecoder {
            decoder: TokenDecoder::new(
                &mut store,
                "text_decoder",
                cfg.text_dim,
                cfg.text_decoder_dim,
                cfg.text_decoder_layers,
                cfg.text_decoder_heads,
                cfg.context_length,
                &mut rng,
            ),
            predict: Linear::new(
                &mut store,
                "text_decoder.predict",
                cfg.text_decoder_dim,
                cfg.vocab_size,
                true,
                &mut rng,
            ),
        };
        let cd = cfg.contrastive_dim();
        let clip_vision_head = Linear::new(&mut store, "clip.vision_proj", cfg.vision_dim, cd, false, &mut rng);
        let clip_text_head = Linear::new(&mut store, "clip.text_proj", cfg.text_dim, cd, false, &mut rng);
        let vision_distill_head = DistillHead::new(&mut store, "vision_head", cfg.vision_dim, cfg, &mut rng);
        let text_distill_head = DistillHead::new(&mut store, "text_head", cfg.text_dim, cfg, &mut rng);
        let maskclip_decoder = TokenDecoder::new(
            &mut store,
            "maskclip_decoder",
            cfg.vision_dim,
            cfg.vision_dim,
            1,
            cfg.maskclip_decoder_heads,
            1 + cfg.num_patches(),
            &mut rng,
        );
        let logit_scale = store.add(
            "clip.logit_scale",
            Tensor::scalar((1.0 / cfg.init_temperature).ln()),
            false,
        );
        let teacher = store.clone();
        Ok(Self {
            config,
            nets: Networks {
                vision,
                text,
                vision_decoder,
                text_decoder,
                clip_vision_head,
                clip_text_head,
                vision_distill_head,
                text_distill_head,
                maskclip_decoder,
                logit_scale,
            },
            student: store,
            teacher,
        })
    }

    /// Contrastive temperature `τ = exp(-logit_scale)` of the student.
    pub fn temperature(&self) -> f64 {
        (-self.student.get(self.nets.logit_scale).item()).exp()
    }
}

/// Single-layer projection followed by row normalization. Fails if any row
/// is (numerically) zero before normalization.
pub fn project_contrastive(tape: &mut Tape, store: &ParamStore, head: &Linear, pooled: Var) -> Result<EmbeddingBatch> {
    let y = head.forward(tape, store, pooled)?;
    let v = tape.value(y);
    for r in 0..v.rows() {
        let n = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(HarmonyError::NonFinite {
                component: "contrastive projection".into(),
                step: 0,
            });
        }
    }
    let (rows, dim) = v.shape();
    let values = tape.l2_normalize_rows(y);
    Ok(EmbeddingBatch { values, rows, dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskStyle;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vision_layers: 1,
            text_layers: 1,
            vision_dim: 16,
            text_dim: 16,
            vision_heads: 2,
            text_heads: 2,
            vision_decoder_dim: 8,
            vision_decoder_heads: 2,
            vision_decoder_layers: 1,
            text_decoder_dim: 8,
            text_decoder_heads: 2,
            maskclip_decoder_heads: 4,
            context_length: 8,
            vocab_size: 16,
            head_output_dim: 12,
            head_hidden_dim: 8,
            head_bottleneck_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn image(seed: f64) -> Image {
        let data = (0..3 * 32 * 32)
            .map(|i| ((i as f64 * 0.37 + seed).sin() + 1.0) / 2.0)
            .collect();
        Image::from_data(32, 32, data).unwrap()
    }

    #[test]
    fn full_mode_yields_cls_plus_patches() {
        let b = EncoderBundle::new(tiny(), 0).unwrap();
        let mut tape = Tape::new();
        let t = b
            .nets
            .vision
            .encode(&mut tape, &b.student, &[image(0.0)], None, MaskMode::Full)
            .unwrap();
        assert_eq!(t.seq, 17);
        assert_eq!(tape.value(t.hidden).shape(), (17, 16));
    }

    #[test]
    fn drop_mode_keeps_quarter() {
        let b = EncoderBundle::new(tiny(), 0).unwrap();
        let mut mask = vec![true; 16];
        for i in [1, 5, 9, 14] {
            mask[i] = false;
        }
        let plan = MaskPlan::from_mask(mask, 0.75, MaskStyle::Random);
        let mut tape = Tape::new();
        let t = b
            .nets
            .vision
            .encode(
                &mut tape,
                &b.student,
                &[image(1.0)],
                Some(&[plan]),
                MaskMode::DropMasked,
            )
            .unwrap();
        assert_eq!(t.seq, 5);
        assert_eq!(t.kept.as_ref().unwrap()[0], vec![1, 5, 9, 14]);
    }

    #[test]
    fn drop_mode_rejects_full_mask() {
        let b = EncoderBundle::new(tiny(), 0).unwrap();
        let plan = MaskPlan::from_mask(vec![true; 16], 1.0, MaskStyle::Random);
        let mut tape = Tape::new();
        let r = b.nets.vision.encode(
            &mut tape,
            &b.student,
            &[image(1.0)],
            Some(&[plan]),
            MaskMode::DropMasked,
        );
        assert!(r.is_err());
    }

    #[test]
    fn substitute_with_empty_mask_equals_full() {
        let b = EncoderBundle::new(tiny(), 3).unwrap();
        let imgs = [image(0.3), image(2.0)];
        let mut t1 = Tape::new();
        let a = b
            .nets
            .vision
            .encode(&mut t1, &b.student, &imgs, None, MaskMode::Full)
            .unwrap();
        let mut t2 = Tape::new();
        let plans = [MaskPlan::empty(16), MaskPlan::empty(16)];
        let c = b
            .nets
            .vision
            .encode(&mut t2, &b.student, &imgs, Some(&plans), MaskMode::SubstituteMaskToken)
            .unwrap();
        assert_eq!(t1.value(a.hidden), t2.value(c.hidden));
    }

    #[test]
    fn interpolation_rows_are_convex() {
        let m = interpolation_matrix(4, 2);
        for r in 0..4 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // 4 -> 2 averages 2x2 neighbourhoods
        assert!((m.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((m.get(0, 5) - 0.25).abs() < 1e-12);
        assert_eq!(interpolation_matrix(3, 3), Tensor::identity(9));
    }

    #[test]
    fn effective_last_layer_rows_unit_norm() {
        let b = EncoderBundle::new(tiny(), 1).unwrap();
        let w = b.nets.vision_distill_head.effective_last_layer(&b.student);
        for r in 0..w.rows() {
            let n: f64 = w.row(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.head_output_dim = 1;
        assert!(c.validate().is_err());
        assert!(ModelConfig::vit_base().validate().is_ok());
    }
}
