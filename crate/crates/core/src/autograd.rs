//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape through [`Tape::param`]; a tape built with [`Tape::no_grad`]
//! never tracks gradients, which is how teacher networks are evaluated.
//! Fused kernels (layer norm, attention, soft cross-entropy) keep the node
//! count low enough for small-batch CPU training.

use std::collections::HashMap;

use crate::error::{HarmonyError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, softmax_in_place, MatRef, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a multi-head attention call over `(batch * seq) x dim` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Recip(Var),
    Exp(Var),
    Gelu(Var),
    Transpose(Var),
    Sum(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor,
        weights: Vec<f64>,
        probs: Tensor,
    },
    WeightedSquaredError {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    track: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaves and parameters produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.by_param
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.by_param
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_scaled(&g, 1.0),
        None => *slot = Some(g),
    }
}

#[inline]
fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation; returns value and derivative
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
            params: HashMap::new(),
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Approximate bytes held by recorded values and saved activations.
    pub fn bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let saved = match &n.op {
                    Op::LayerNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
                    Op::Attention { probs, .. } => probs.len(),
                    Op::SoftCrossEntropy { targets, probs, .. } => targets.len() + probs.len(),
                    Op::WeightedSquaredError { target, .. } => target.len(),
                    _ => 0,
                };
                (n.value.len() + saved) * std::mem::size_of::<f64>()
            })
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::var`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(HarmonyError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xr, xc) = self.value(x).shape();
        if self.value(row).shape() != (1, xc) {
            return Err(HarmonyError::Shape(format!(
                "add_row: {:?} onto {xr}x{xc}",
                self.value(row).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..xr {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `x * s` for a `1 x 1` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(HarmonyError::Shape("scale_by expects a 1x1 scale".into()));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / v);
        let rg = self.rg(x);
        self.push(out, Op::Recip(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// `Σ_i w_i x_i` over `1 x 1` variables.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| HarmonyError::InvalidArgument("weighted_sum of nothing".into()))
    }

    /// Row gather; gradient scatters back with accumulation, so indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(HarmonyError::Shape(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let out = self.value(x).select_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if self.value(gamma).shape() != (1, cols) || self.value(beta).shape() != (1, cols) {
            return Err(HarmonyError::Shape("layer_norm affine shape".into()));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMALIZE_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `(batch * seq) x dim`; heads split `dim` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape {
            batch,
            seq,
            heads,
            causal,
        } = shape;
        let (rows, dim) = self.value(q).shape();
        if rows != batch * seq || self.value(k).shape() != (rows, dim) || self.value(v).shape() != (rows, dim) {
            return Err(HarmonyError::Shape(format!(
                "attention inputs {rows}x{dim} for batch {batch} seq {seq}"
            )));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(HarmonyError::Shape(format!(
                "attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(rows, dim);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    MatRef::strided(&qd[off..], dim, 1),
                    MatRef::strided(&kd[off..], 1, dim),
                    p,
                    seq,
                    0.0,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    if causal {
                        for x in &mut row[i + 1..] {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row, 1.0 / scale);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    MatRef::strided(p, seq, 1),
                    MatRef::strided(&vd[off..], dim, 1),
                    &mut out.data_mut()[off..],
                    dim,
                    0.0,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, shape, probs }, rg))
    }

    /// `-Σ_i w_i Σ_j A_ij log softmax(z_i)_j` for constant targets `A`.
    ///
    /// With `w_i = 1/N` and row-stochastic `A` this is the mean row
    /// cross-entropy `H(A, softmax(z))`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor, weights: Vec<f64>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() || weights.len() != z.rows() {
            return Err(HarmonyError::Shape(format!(
                "soft_cross_entropy: logits {:?}, targets {:?}, {} weights",
                z.shape(),
                targets.shape(),
                weights.len()
            )));
        }
        let probs = z.softmax_rows(1.0);
        let mut loss = 0.0;
        for r in 0..z.rows() {
            if weights[r] == 0.0 {
                continue;
            }
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut ce = 0.0;
            for (a, v) in targets.row(r).iter().zip(row) {
                if *a != 0.0 {
                    ce -= a * (v - lse);
                }
            }
            loss += weights[r] * ce;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            rg,
        ))
    }

    /// `Σ_i w_i mean_j (p_ij - t_ij)²` against a constant target.
    pub fn weighted_squared_error(&mut self, pred: Var, target: Tensor, weights: Vec<f64>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weights.len() != p.rows() {
            return Err(HarmonyError::Shape(format!(
                "weighted_squared_error: pred {:?}, target {:?}, {} weights",
                p.shape(),
                target.shape(),
                weights.len()
            )));
        }
        let cols = p.cols().max(1) as f64;
        let mut loss = 0.0;
        for r in 0..p.rows() {
            if weights[r] == 0.0 {
                continue;
            }
            let se: f64 = p.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
            loss += weights[r] * se / cols;
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedSquaredError { pred, target, weights },
            rg,
        ))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).shape() != (1, 1) {
            return Err(HarmonyError::Shape("backward expects a scalar output".into()));
        }
        let mut result = Gradients::default();
        if !self.rg(out) {
            return Ok(result);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            match node.op {
                Op::Leaf => {
                    result.by_var.insert(Var(i), g);
                }
                Op::Param(id) => {
                    result.by_param.insert(id, g);
                }
                _ => {}
            }
        }
        Ok(result)
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.matmul_nt(val(b))?);
                }
                if needs(b) {
                    let (k, n) = val(b).shape();
                    let mut gb = Tensor::zeros(k, n);
                    gemm(
                        k,
                        val(a).rows(),
                        n,
                        MatRef::transposed(val(a)),
                        MatRef::normal(g),
                        gb.data_mut(),
                        n,
                        0.0,
                    );
                    accumulate(&mut grads[b.0], gb);
                }
            }
            &Op::MatMulNt(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if needs(a) {
                    accumulate(&mut grads[a.0], g.matmul(val(b))?);
                }
                if needs(b) {
                    let (n, k) = val(b).shape();
                    let mut gb = Tensor::zeros(n, k);
                    gemm(
                        n,
                        g.rows(),
                        k,
                        MatRef::transposed(g),
                        MatRef::normal(val(a)),
                        gb.data_mut(),
                        k,
                        0.0,
                    );
                    accumulate(&mut grads[b.0], gb);
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.zip_map(val(b), |x, y| x * y));
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.zip_map(val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(x, row) => {
                if needs(x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if needs(row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                }
            }
            &Op::Scale(x, s) => {
                if needs(x) {
                    accumulate(&mut grads[x.0], g.map(|v| v * s));
                }
            }
            &Op::ScaleBy(x, s) => {
                let sv = val(s).item();
                if needs(x) {
                    accumulate(&mut grads[x.0], g.map(|v| v * sv));
                }
                if needs(s) {
                    let d: f64 = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads[s.0], Tensor::scalar(d));
                }
            }
            &Op::Recip(x) => {
                if needs(x) {
                    let y = &node.value;
                    accumulate(&mut grads[x.0], g.zip_map(y, |gv, yv| -gv * yv * yv));
                }
            }
            &Op::Exp(x) => {
                if needs(x) {
                    accumulate(&mut grads[x.0], g.zip_map(&node.value, |gv, yv| gv * yv));
                }
            }
            &Op::Gelu(x) => {
                if needs(x) {
                    accumulate(&mut grads[x.0], g.zip_map(val(x), |gv, xv| gv * gelu(xv).1));
                }
            }
            &Op::Transpose(x) => {
                if needs(x) {
                    accumulate(&mut grads[x.0], g.transpose());
                }
            }
            &Op::Sum(x) => {
                if needs(x) {
                    let (r, c) = val(x).shape();
                    accumulate(&mut grads[x.0], Tensor::full(r, c, g.item()));
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let (r, c) = val(*x).shape();
                    let mut gx = Tensor::zeros(r, c);
                    for (o, &i) in idx.iter().enumerate() {
                        for (d, s) in gx.row_mut(i).iter_mut().zip(g.row(o)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if needs(p) {
                        let slice = g.data()[start * c..(start + r) * c].to_vec();
                        accumulate(&mut grads[p.0], Tensor::from_vec(r, c, slice)?);
                    }
                    start += r;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = val(*gamma).data();
                if needs(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xr[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        let o = gx.row_mut(r);
                        for c in 0..cols {
                            o[c] = inv_std[r] * (dxhat[c] - m1 - xr[c] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if needs(*gamma) || needs(*beta) {
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for c in 0..cols {
                            gg.data_mut()[c] += gr[c] * xr[c];
                            gb.data_mut()[c] += gr[c];
                        }
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if needs(*beta) {
                        accumulate(&mut grads[beta.0], gb);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if needs(*x) {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let AttentionShape { batch, seq, heads, .. } = *shape;
                let (rows, dim) = val(*q).shape();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut gq = Tensor::zeros(rows, dim);
                let mut gk = Tensor::zeros(rows, dim);
                let mut gv = Tensor::zeros(rows, dim);
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * dim + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let go = MatRef::strided(&g.data()[off..], dim, 1);
                        // dV = Pᵀ dO
                        gemm(
                            seq,
                            seq,
                            dh,
                            MatRef::strided(p, 1, seq),
                            go,
                            &mut gv.data_mut()[off..],
                            dim,
                            0.0,
                        );
                        // dP = dO Vᵀ
                        gemm(seq, dh, seq, go, MatRef::strided(&vd[off..], 1, dim), &mut dp, seq, 0.0);
                        // dS = P ⊙ (dP - rowsum(dP ⊙ P)), folded with the score scale
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (d, pv) in dr.iter_mut().zip(pr) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        // dQ = dS K ; dK = dSᵀ Q
                        gemm(
                            seq,
                            seq,
                            dh,
                            MatRef::strided(&dp, seq, 1),
                            MatRef::strided(&kd[off..], dim, 1),
                            &mut gq.data_mut()[off..],
                            dim,
                            0.0,
                        );
                        gemm(
                            seq,
                            seq,
                            dh,
                            MatRef::strided(&dp, 1, seq),
                            MatRef::strided(&qd[off..], dim, 1),
                            &mut gk.data_mut()[off..],
                            dim,
                            0.0,
                        );
                    }
                }
                if needs(*q) {
                    accumulate(&mut grads[q.0], gq);
                }
                if needs(*k) {
                    accumulate(&mut grads[k.0], gk);
                }
                if needs(*v) {
                    accumulate(&mut grads[v.0], gv);
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if needs(*logits) {
                    let gs = g.item();
                    let mut gz = Tensor::zeros(probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        let w = weights[r] * gs;
                        if w == 0.0 {
                            continue;
                        }
                        let mass: f64 = targets.row(r).iter().sum();
                        for ((o, p), a) in gz.row_mut(r).iter_mut().zip(probs.row(r)).zip(targets.row(r)) {
                            *o = w * (p * mass - a);
                        }
                    }
                    accumulate(&mut grads[logits.0], gz);
                }
            }
            Op::WeightedSquaredError { pred, target, weights } => {
                if needs(*pred) {
                    let gs = g.item();
                    let p = val(*pred);
                    let cols = p.cols().max(1) as f64;
                    let mut gp = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let w = weights[r] * gs * 2.0 / cols;
                        if w == 0.0 {
                            continue;
                        }
                        for ((o, a), b) in gp.row_mut(r).iter_mut().zip(p.row(r)).zip(target.row(r)) {
                            *o = w * (a - b);
                        }
                    }
                    accumulate(&mut grads[pred.0], gp);
                }
            }
        }
        Ok(())
    }
}
