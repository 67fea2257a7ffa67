use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// AdamW over the subset of a [`ParamSet`] named at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet, names: Vec<String>) -> Result<Self> {
        let mut m = Vec::with_capacity(names.len());
        for n in &names {
            let p = params.value(n)?;
            m.push(Tensor::zeros(p.rows(), p.cols()));
        }
        let v = m.clone();
        Ok(Self { config, step: 0, names, m, v })
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<f64> {
        let mut sq = 0.0;
        for n in &self.names {
            sq += params.grad(n)?.sq_norm();
        }
        let norm = sq.sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, n) in self.names.iter().enumerate() {
            let g: Vec<f64> = params.grad(n)?.data().iter().map(|g| g * clip).collect();
            let value = params.value_mut(n)?.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[j]);
            }
        }
        params.zero_grads();
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic_and_leaves_others_alone() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::full(1, 2, 5.0));
        p.insert("frozen", Tensor::full(1, 1, 1.0));
        let cfg = AdamWConfig { lr: 0.1, clip_norm: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p, vec!["x".into()]).unwrap();
        for _ in 0..500 {
            let x = p.value("x").unwrap().clone();
            let idx = p.index_of("x").unwrap();
            p.grad_by_index_mut(idx).data_mut().copy_from_slice(x.data());
            let fidx = p.index_of("frozen").unwrap();
            p.grad_by_index_mut(fidx).data_mut()[0] = 1.0;
            opt.step(&mut p).unwrap();
        }
        assert!(p.value("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(p.value("frozen").unwrap().data()[0], 1.0);
    }
}
