//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{HarmonyError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            clip_norm: Some(3.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(HarmonyError::Config(format!("invalid optimizer settings {self:?}")));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(HarmonyError::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gradients keyed by parameter, iterated in id order so reductions are
/// reproducible.
pub type GradMap = HashMap<ParamId, Tensor>;

fn sorted_ids(grads: &GradMap) -> Vec<ParamId> {
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    ids
}

pub fn global_norm(grads: &GradMap) -> f64 {
    sorted_ids(grads)
        .iter()
        .map(|id| grads[id].sum_sq())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the applied factor (1 when no clipping was needed).
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in grads.values_mut() {
        g.scale_in_place(factor);
    }
    factor
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. Parameters without a gradient are left untouched,
    /// including weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64, weight_decay: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(HarmonyError::Shape(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        self.t += 1;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in sorted_ids(grads) {
            let g = &grads[&id];
            let decay = store.entry(id).decay;
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(HarmonyError::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let wd = if decay { lr * weight_decay } else { 0.0 };
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *pv -= wd * *pv;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(vals: &[f64]) -> GradMap {
        let mut s = ParamStore::new();
        let id = s.add("g", Tensor::zeros(1, vals.len()), true);
        let mut g = GradMap::new();
        g.insert(id, Tensor::from_vec(1, vals.len(), vals.to_vec()).unwrap());
        g
    }

    #[test]
    fn clip_factors() {
        let mut g = grads(&[0.6, 0.8]);
        assert_eq!(clip_gradients(&mut g, 3.0), 1.0);
        let mut g = grads(&[3.6, 4.8]);
        assert_eq!(clip_gradients(&mut g, 3.0), 0.5);
        assert!((global_norm(&g) - 3.0).abs() < 1e-12);
        let mut z = grads(&[0.0, 0.0]);
        assert_eq!(clip_gradients(&mut z, 3.0), 1.0);
        assert_eq!(global_norm(&z), 0.0);
    }

    #[test]
    fn adamw_first_step_matches_formula() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::from_rows(&[&[1.0, -2.0]]), true);
        let b = s.add("b", Tensor::from_rows(&[&[0.5]]), false);
        let mut opt = AdamW::new(OptimizerConfig::default(), &s);
        let mut g = GradMap::new();
        g.insert(w, Tensor::from_rows(&[&[0.1, -0.3]]));
        g.insert(b, Tensor::from_rows(&[&[2.0]]));
        opt.step(&mut s, &g, 0.01, 0.1).unwrap();
        // first bias-corrected step moves each entry by lr · g/(|g| + eps)
        let expect_w0 = 1.0 - 0.01 * 0.1 * 1.0 - 0.01 * 0.1 / (0.1 + 1e-6);
        assert!((s.get(w).get(0, 0) - expect_w0).abs() < 1e-12);
        let expect_b = 0.5 - 0.01 * 2.0 / (2.0 + 1e-6);
        assert!((s.get(b).item() - expect_b).abs() < 1e-12);
    }

    #[test]
    fn params_without_grad_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::full(1, 2, 1.0), true);
        let _ = s.add("b", Tensor::full(1, 2, 1.0), true);
        let mut opt = AdamW::new(OptimizerConfig::default(), &s);
        let mut g = GradMap::new();
        g.insert(a, Tensor::full(1, 2, 1.0));
        opt.step(&mut s, &g, 0.1, 0.5).unwrap();
        assert_eq!(s.get(s.find("b").unwrap()).data(), &[1.0, 1.0]);
    }
}
