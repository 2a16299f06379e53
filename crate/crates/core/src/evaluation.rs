//! Zero-shot classification, linear probing and image–text retrieval.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{DataConfig, Dataset, COLORS, NUM_CLASSES, SHAPES};
use crate::encoders::{project_contrastive, EncoderBundle, MaskMode, TokenBatch};
use crate::error::{HarmonyError, Result};
use crate::image::Image;
use crate::params::ParamStore;
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;
use crate::text::Tokenizer;

/// Seed offset separating the held-out corpus from the training corpus.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out samples rendered for evaluation.
    pub samples: usize,
    /// Training samples whose features fit the linear probe.
    pub probe_train_samples: usize,
    pub probe_epochs: usize,
    pub probe_lrs: Vec<f64>,
    pub probe_weight_decay: f64,
    /// Images per forward pass.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            probe_train_samples: 1000,
            probe_epochs: 200,
            probe_lrs: vec![0.03, 0.1, 0.3, 1.0],
            probe_weight_decay: 1e-4,
            chunk: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.chunk == 0 || self.probe_epochs == 0 {
            return Err(HarmonyError::Config(
                "eval needs samples >= 2, chunk > 0 and probe_epochs > 0".into(),
            ));
        }
        if self.probe_lrs.is_empty() || self.probe_lrs.iter().any(|&l| !(l > 0.0)) {
            return Err(HarmonyError::Config(
                "probe_lrs must be a non-empty list of positive rates".into(),
            ));
        }
        if !(self.probe_weight_decay >= 0.0) {
            return Err(HarmonyError::Config("probe_weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// The held-out corpus: same generator, salted seed.
pub fn eval_dataset(data: &DataConfig, eval: &EvalConfig) -> Result<Dataset> {
    Dataset::in_memory(&DataConfig {
        n_samples: eval.samples,
        seed: data.seed ^ EVAL_SEED_SALT,
        ..data.clone()
    })
}

/// Unit-normalized contrastive image embeddings, one row per image.
pub fn image_embeddings(bundle: &EncoderBundle, store: &ParamStore, images: &[Image], chunk: usize) -> Result<Tensor> {
    let nets = &bundle.nets;
    let mut parts = Vec::new();
    for c in images.chunks(chunk.max(1)) {
        let mut tape = Tape::no_grad();
        let tok = nets.vision.encode(&mut tape, store, c, None, MaskMode::Full)?;
        let cls = tok.cls(&mut tape)?;
        let e = project_contrastive(&mut tape, store, &nets.clip_vision_head, cls)?;
        parts.push(tape.value(e.values).clone());
    }
    stack(parts)
}

/// Unit-normalized contrastive text embeddings, one row per caption.
pub fn text_embeddings(
    bundle: &EncoderBundle,
    store: &ParamStore,
    tokens: &TokenBatch,
    chunk: usize,
) -> Result<Tensor> {
    let nets = &bundle.nets;
    let mut parts = Vec::new();
    let n = tokens.ids.len();
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let part = TokenBatch {
            ids: tokens.ids[start..end].to_vec(),
            eos_positions: tokens.eos_positions[start..end].to_vec(),
        };
        let mut tape = Tape::no_grad();
        let tok = nets.text.encode(&mut tape, store, &part)?;
        let pooled = tok.pooled.expect("text encoder pools");
        let e = project_contrastive(&mut tape, store, &nets.clip_text_head, pooled)?;
        parts.push(tape.value(e.values).clone());
    }
    stack(parts)
}

/// Raw vision CLS features (before any head), one row per image.
pub fn cls_features(bundle: &EncoderBundle, store: &ParamStore, images: &[Image], chunk: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    for c in images.chunks(chunk.max(1)) {
        let mut tape = Tape::no_grad();
        let tok = bundle.nets.vision.encode(&mut tape, store, c, None, MaskMode::Full)?;
        let cls = tok.cls(&mut tape)?;
        parts.push(tape.value(cls).clone());
    }
    stack(parts)
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(HarmonyError::InvalidArgument("nothing to embed".into()));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::vstack(&refs)
}

pub const PROMPT_TEMPLATES: [&str; 2] = ["a photo of a {color} {shape}", "an image of a {color} {shape}"];

/// Caption prompts per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub prompts: Vec<Vec<String>>,
    pub tokens: Vec<TokenBatch>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Vec<String>>, tokenizer: &Tokenizer) -> Result<Self> {
        if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
            return Err(HarmonyError::InvalidArgument(
                "every class needs at least one prompt".into(),
            ));
        }
        let tokens = prompts
            .iter()
            .map(|p| tokenizer.encode_batch(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { prompts, tokens })
    }

    /// The two standard templates for each class of the synthetic corpus.
    pub fn synthetic(tokenizer: &Tokenizer) -> Result<Self> {
        let prompts = (0..NUM_CLASSES)
            .map(|c| {
                let (s, col) = crate::data::class_parts(c);
                PROMPT_TEMPLATES
                    .iter()
                    .map(|t| t.replace("{color}", COLORS[col]).replace("{shape}", SHAPES[s]))
                    .collect()
            })
            .collect();
        Self::new(prompts, tokenizer)
    }

    pub fn num_classes(&self) -> usize {
        self.prompts.len()
    }

    /// Per-class embedding: mean of prompt embeddings, renormalized.
    pub fn class_embeddings(&self, bundle: &EncoderBundle, store: &ParamStore) -> Result<Tensor> {
        let rows = self
            .tokens
            .iter()
            .map(|t| Ok(text_embeddings(bundle, store, t, 64)?.mean_rows()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::vstack(&refs)?.l2_normalize_rows())
    }
}

/// Index of the maximum, lower index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicts the class with the highest cosine similarity.
pub fn classify_embeddings(image_embs: &Tensor, class_embs: &Tensor) -> Result<Vec<usize>> {
    if class_embs.rows() == 0 {
        return Err(HarmonyError::InvalidArgument("no class embeddings".into()));
    }
    let sims = image_embs.l2_normalize_rows().matmul_nt(class_embs)?;
    Ok((0..sims.rows()).map(|r| argmax(sims.row(r))).collect())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64
}

/// Zero-shot predictions and accuracy with the student weights.
pub fn zero_shot_classify(
    bundle: &EncoderBundle,
    images: &[Image],
    labels: &[usize],
    prompts: &PromptSet,
) -> Result<(Vec<usize>, f64)> {
    let store = &bundle.student;
    let classes = prompts.class_embeddings(bundle, store)?;
    let embs = image_embeddings(bundle, store, images, 64)?;
    let pred = classify_embeddings(&embs, &classes)?;
    let acc = accuracy(&pred, labels);
    Ok((pred, acc))
}

/// Per-column mean and standard deviation of the training features.
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean = x.mean_rows().into_vec();
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (c, v) in x.row(r).iter().enumerate() {
            var[c] += (v - mean[c]).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-8)).collect())
}

fn apply_standardizer(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[c]) / std[c];
        }
    }
    out
}

/// Multinomial logistic regression, full-batch gradient descent with
/// momentum 0.9. Returns `(weights, bias)`.
pub fn fit_logistic(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    lr: f64,
    epochs: usize,
    weight_decay: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = x.shape();
    if labels.len() != n || n == 0 {
        return Err(HarmonyError::Shape(format!(
            "{n} feature rows for {} labels",
            labels.len()
        )));
    }
    let mut w = Tensor::zeros(d, classes);
    let mut b = vec![0.0; classes];
    let mut vw = Tensor::zeros(d, classes);
    let mut vb = vec![0.0; classes];
    for _ in 0..epochs {
        let mut logits = x.matmul(&w)?;
        for r in 0..n {
            for (z, bb) in logits.row_mut(r).iter_mut().zip(&b) {
                *z += bb;
            }
        }
        let mut g = logits.softmax_rows(1.0);
        for (r, &y) in labels.iter().enumerate() {
            let row = g.row_mut(r);
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut gw = x.transpose().matmul(&g)?;
        gw.add_scaled(&w, weight_decay);
        let gb = g
            .mean_rows()
            .into_vec()
            .iter()
            .map(|v| v * n as f64)
            .collect::<Vec<_>>();
        vw.scale_in_place(0.9);
        vw.add_scaled(&gw, 1.0);
        w.add_scaled(&vw, -lr);
        for c in 0..classes {
            vb[c] = 0.9 * vb[c] + gb[c];
            b[c] -= lr * vb[c];
        }
    }
    Ok((w, b))
}

pub fn predict_logistic(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Vec<usize>> {
    let mut logits = x.matmul(w)?;
    for r in 0..logits.rows() {
        for (z, bb) in logits.row_mut(r).iter_mut().zip(b) {
            *z += bb;
        }
    }
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

/// Result of a learning-rate sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub best_accuracy: f64,
    pub best_lr: f64,
    pub per_lr: Vec<(f64, f64)>,
}

/// Fits one logistic probe per learning rate on standardized frozen
/// features and reports the best validation accuracy.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    lrs: &[f64],
    epochs: usize,
    weight_decay: f64,
) -> Result<ProbeResult> {
    let classes = train_y.iter().chain(val_y).max().map_or(0, |m| m + 1);
    if train_y.iter().all(|&y| y == train_y[0]) {
        return Err(HarmonyError::InvalidArgument(
            "linear probe needs at least two classes".into(),
        ));
    }
    if lrs.is_empty() {
        return Err(HarmonyError::InvalidArgument("empty learning-rate grid".into()));
    }
    let (mean, std) = standardizer(train_x);
    let tx = apply_standardizer(train_x, &mean, &std);
    let vx = apply_standardizer(val_x, &mean, &std);
    let mut per_lr = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let (w, b) = fit_logistic(&tx, train_y, classes, lr, epochs, weight_decay)?;
        let acc = accuracy(&predict_logistic(&vx, &w, &b)?, val_y);
        per_lr.push((lr, acc));
    }
    let (best_lr, best_accuracy) =
        per_lr.iter().copied().fold(
            (f64::NAN, f64::NEG_INFINITY),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    Ok(ProbeResult {
        best_accuracy,
        best_lr,
        per_lr,
    })
}

/// Recall at each `k` for queries along rows: the paired item of row `i`
/// is column `i`. Ranks count strictly larger scores plus equal scores at
/// lower indices.
pub fn recall_at_k(sims: &Tensor, ks: &[usize]) -> Result<Vec<f64>> {
    let (n, m) = sims.shape();
    if n != m {
        return Err(HarmonyError::Shape(format!("retrieval needs paired rows, got {n}x{m}")));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > n || k == 0) {
        return Err(HarmonyError::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    let ranks: Vec<usize> = (0..n)
        .map(|i| {
            let row = sims.row(i);
            let s = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &v)| v > s || (v == s && j < i))
                .count()
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

/// Retrieval in both directions over cosine similarities of paired rows.
pub fn retrieval_at_k(image_embs: &Tensor, text_embs: &Tensor, ks: &[usize]) -> Result<RetrievalResult> {
    let sims = image_embs
        .l2_normalize_rows()
        .matmul_nt(&text_embs.l2_normalize_rows())?;
    Ok(RetrievalResult {
        ks: ks.to_vec(),
        image_to_text: recall_at_k(&sims, ks)?,
        text_to_image: recall_at_k(&sims.transpose(), ks)?,
    })
}

/// All evaluation metrics of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub zero_shot: f64,
    pub linear_probe: ProbeResult,
    pub retrieval: RetrievalResult,
}

impl EvalReport {
    /// Rows of `(metric, split, value)`.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut rows = vec![
            ("zero_shot_accuracy".to_string(), "eval", self.zero_shot),
            (
                "linear_probe_accuracy".to_string(),
                "eval",
                self.linear_probe.best_accuracy,
            ),
            ("linear_probe_best_lr".to_string(), "eval", self.linear_probe.best_lr),
        ];
        let r = &self.retrieval;
        for (i, k) in r.ks.iter().enumerate() {
            rows.push((format!("image_to_text_r@{k}"), "eval", r.image_to_text[i]));
            rows.push((format!("text_to_image_r@{k}"), "eval", r.text_to_image[i]));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,split,value,step\n");
        for (m, split, v) in self.rows() {
            s.push_str(&format!("{m},{split},{v},{}\n", self.step));
        }
        s
    }

    /// Writes `eval.csv` and `eval.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HarmonyError::io(dir, e))?;
        let csv = dir.join("eval.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| HarmonyError::io(&csv, e))?;
        let json = dir.join("eval.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&json, text).map_err(|e| HarmonyError::io(&json, e))
    }
}

/// Zero-shot, linear probe (fit on training features, scored on the
/// held-out set) and retrieval on the held-out set.
pub fn evaluate(
    bundle: &EncoderBundle,
    train: &Dataset,
    data: &DataConfig,
    cfg: &EvalConfig,
    step: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let held_out = eval_dataset(data, cfg)?;
    let store = &bundle.student;
    let prompts = PromptSet::synthetic(&held_out.tokenizer)?;
    let (_, zero_shot) = zero_shot_classify(bundle, &held_out.images, &held_out.class_ids, &prompts)?;

    let mut probe_idx: Vec<usize> = (0..train.len()).collect();
    probe_idx.shuffle(&mut stream(data.seed, &[purpose::PROBE]));
    probe_idx.truncate(cfg.probe_train_samples.min(train.len()));
    let train_images: Vec<Image> = probe_idx.iter().map(|&i| train.images[i].clone()).collect();
    let train_y: Vec<usize> = probe_idx.iter().map(|&i| train.class_ids[i]).collect();
    let tx = cls_features(bundle, store, &train_images, cfg.chunk)?;
    let vx = cls_features(bundle, store, &held_out.images, cfg.chunk)?;
    let linear_probe = linear_probe(
        &tx,
        &train_y,
        &vx,
        &held_out.class_ids,
        &cfg.probe_lrs,
        cfg.probe_epochs,
        cfg.probe_weight_decay,
    )?;

    let img = image_embeddings(bundle, store, &held_out.images, cfg.chunk)?;
    let tokens = held_out.tokenizer.encode_batch(&held_out.captions)?;
    let txt = text_embeddings(bundle, store, &tokens, cfg.chunk)?;
    let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= held_out.len()).collect();
    let retrieval = retrieval_at_k(&img, &txt, &ks)?;
    Ok(EvalReport {
        step,
        zero_shot,
        linear_probe,
        retrieval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full-sort ranking: stable sort by descending score keeps lower
    /// indices first among ties.
    fn recall_by_sort(sims: &Tensor, k: usize) -> f64 {
        let n = sims.rows();
        let hits = (0..n)
            .filter(|&i| {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| sims.get(i, b).total_cmp(&sims.get(i, a)));
                order[..k].contains(&i)
            })
            .count();
        hits as f64 / n as f64
    }

    #[test]
    fn two_item_retrieval_is_perfect() {
        let s = Tensor::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(recall_at_k(&s, &[1]).unwrap(), vec![1.0]);
        assert_eq!(recall_at_k(&s.transpose(), &[1]).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_embeddings_use_tie_break() {
        let n = 8;
        let s = Tensor::full(n, n, 0.5);
        let r = recall_at_k(&s, &[1, n]).unwrap();
        // only query 0 wins its tie
        assert_eq!(r, vec![1.0 / n as f64, 1.0]);
    }

    #[test]
    fn k_larger_than_corpus_rejected() {
        assert!(recall_at_k(&Tensor::identity(3), &[4]).is_err());
    }

    #[test]
    fn matches_full_sort_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..1000 {
            let n = rng.random_range(1..12);
            // coarse values so ties occur
            let data = (0..n * n).map(|_| rng.random_range(0..4) as f64).collect();
            let s = Tensor::from_vec(n, n, data).unwrap();
            for k in 1..=n {
                assert_eq!(
                    recall_at_k(&s, &[k]).unwrap()[0],
                    recall_by_sort(&s, k),
                    "trial {trial}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let s = Tensor::from_vec(n, n, (0..n * n).map(|_| rng.random::<f64>()).collect()).unwrap();
            let r = recall_at_k(&s, &[1, 5, 10]).unwrap();
            prop_assert!(r[0] <= r[1] && r[1] <= r[2] && r[2] <= 1.0);
        }

        #[test]
        fn zero_shot_invariant_to_image_scale(seed in 0u64..200, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_vec(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let cls = Tensor::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().l2_normalize_rows();
            let scaled = img.map(|v| v * scale);
            prop_assert_eq!(classify_embeddings(&img, &cls).unwrap(), classify_embeddings(&scaled, &cls).unwrap());
        }
    }

    #[test]
    fn argmax_toy_case() {
        let classes = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let img = Tensor::from_rows(&[&[0.9, 0.1]]);
        assert_eq!(classify_embeddings(&img, &classes).unwrap(), vec![0]);
    }

    #[test]
    fn separable_features_are_probed_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let mut x = Tensor::zeros(n, 3);
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 3;
                for j in 0..3 {
                    x.set(i, j, if j == c { 2.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
                }
                y.push(c);
            }
            (x, y)
        };
        let (tx, ty) = make(&mut rng, 60);
        let (vx, vy) = make(&mut rng, 30);
        let r = linear_probe(&tx, &ty, &vx, &vy, &[0.1], 100, 0.0).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
        assert_eq!(r.per_lr.len(), 1);
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 800;
        let k = 4;
        let x = Tensor::from_vec(n, 8, (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (tx, vx) = (
            x.select_rows(&(0..400).collect::<Vec<_>>()),
            x.select_rows(&(400..800).collect::<Vec<_>>()),
        );
        let r = linear_probe(&tx, &y[..400], &vx, &y[400..], &[0.1], 100, 0.0).unwrap();
        // chance is 0.25; 400 draws give a standard error near 0.022
        assert!((r.best_accuracy - 0.25).abs() < 0.09, "{}", r.best_accuracy);
    }

    #[test]
    fn single_class_probe_rejected() {
        let x = Tensor::zeros(4, 2);
        assert!(linear_probe(&x, &[1, 1, 1, 1], &x, &[1, 1, 1, 1], &[0.1], 10, 0.0).is_err());
    }

    #[test]
    fn prompt_order_does_not_change_class_embeddings() {
        let cfg = crate::config::RunConfig::tiny();
        let bundle = EncoderBundle::new(cfg.model.clone(), 0).unwrap();
        let tok = crate::data::caption_tokenizer(cfg.model.context_length).unwrap();
        let p = PromptSet::synthetic(&tok).unwrap();
        let rev = PromptSet::new(
            p.prompts.iter().map(|v| v.iter().rev().cloned().collect()).collect(),
            &tok,
        )
        .unwrap();
        let a = p.class_embeddings(&bundle, &bundle.student).unwrap();
        let b = rev.class_embeddings(&bundle, &bundle.student).unwrap();
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).data().iter().all(|&d| d < 1e-12));
        assert!(PromptSet::new(vec![vec![]], &tok).is_err());
    }
}
