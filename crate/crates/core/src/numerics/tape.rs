//! A small reverse-mode differentiation tape over rank-2 tensors.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Leaves bound from a [`ParamSet`] remember their parameter index so that
//! [`Tape::accumulate_grads`] can add gradients back into the set.

use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{attention_backward, attention_forward, silu, silu_grad};
use super::params::ParamSet;
use super::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};
use crate::layout::AttentionMask;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Gather { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    MseMean(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: HashMap<usize, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Binds parameter `name`. Repeated binds of the same parameter return the
    /// same leaf. Gradients flow to it only when `trainable` is set on the
    /// first bind.
    pub fn param(&mut self, params: &ParamSet, name: &str, trainable: bool) -> Result<Var> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let value = params.by_index(idx).1.value.clone();
        let v = self.push(value, Op::Leaf { param: Some(idx) }, trainable);
        self.bound.insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape(format!(
                "add_row: {}x{} onto {}x{}",
                rv.rows(),
                rv.cols(),
                av.rows(),
                av.cols()
            )));
        }
        let c = av.cols();
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data()[..c]) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Row-wise RMS normalization with a learned `1 × c` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let c = xv.cols();
        if gv.len() != c {
            return Err(Error::Shape(format!("rms_norm gain {} for width {c}", gv.len())));
        }
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for (o, g) in out.row_mut(r).iter_mut().zip(gv.data()) {
                *o *= inv * g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Multi-head attention; `mask = None` lets every query see every key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Arc<AttentionMask>>,
    ) -> Result<Var> {
        let (out, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            mask.map(|m| m.as_ref()),
        )?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Selects rows of `src` (embedding lookup when `src` is a table).
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(src).gather_rows(idx)?;
        let ng = self.ng(src);
        Ok(self.push(out, Op::Gather { src, idx: idx.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Mean cross-entropy of each logits row against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                lv.rows()
            )));
        }
        let vocab = lv.cols();
        let mut probs = Tensor::zeros(lv.rows(), vocab);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::InvalidArgument(format!("target {t} >= vocab {vocab}")));
            }
            let ls = super::ops::log_softmax(lv.row(r));
            total -= ls[t];
            for (p, l) in probs.row_mut(r).iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let loss = Tensor::scalar(total / targets.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Mean over entries of `(a - b)²`.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.value(a).sub(self.value(b))?;
        let loss = Tensor::scalar(diff.sq_norm() / diff.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(loss, Op::MseMean(a, b), ng))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        self.value(loss).ensure_finite("loss")?;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &Tensor) {
        // Ops are reborrowed by index so that `acc` can take `&mut self`.
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            &Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(b));
                let gb = matmul_tn(self.value(a), g);
                self.acc(a, ga);
                self.acc(b, gb);
            }
            &Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                let ga = g.zip(self.value(b), |x, y| x * y).expect("same shape");
                let gb = g.zip(self.value(a), |x, y| x * y).expect("same shape");
                self.acc(a, ga);
                self.acc(b, gb);
            }
            &Op::AddRow(a, row) => {
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for r in 0..g.rows() {
                    for (s, x) in gr.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                let shape = self.value(row).shape().to_vec();
                let gr = Tensor::raw(1, c, gr).reshape(shape).expect("same size");
                self.acc(a, g.clone());
                self.acc(row, gr);
            }
            &Op::Scale(a, s) => {
                self.acc(a, g.scale(s));
            }
            &Op::Silu(a) => {
                let ga = g.zip(self.value(a), |gv, x| gv * silu_grad(x)).expect("same shape");
                self.acc(a, ga);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = self.value(x);
                let gv = self.value(gain);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), c);
                let mut gg = vec![0.0; c];
                for r in 0..xv.rows() {
                    let inv = inv_rms[r];
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let mut dot = 0.0;
                    for t in 0..c {
                        let xhat = xr[t] * inv;
                        gg[t] += gr[t] * xhat;
                        dot += gr[t] * gv.data()[t] * xhat;
                    }
                    let mean_dot = dot / c as f64;
                    for (t, o) in gx.row_mut(r).iter_mut().enumerate() {
                        let xhat = xr[t] * inv;
                        *o = inv * (gr[t] * gv.data()[t] - xhat * mean_dot);
                    }
                }
                let shape = gv.shape().to_vec();
                let gg = Tensor::raw(1, c, gg).reshape(shape).expect("same size");
                self.acc(x, gx);
                self.acc(gain, gg);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (gq, gk, gv) = attention_backward(
                    self.value(q),
                    self.value(k),
                    self.value(v),
                    *heads,
                    probs,
                    g,
                );
                self.acc(q, gq);
                self.acc(k, gk);
                self.acc(v, gv);
            }
            Op::Gather { src, idx } => {
                let src = *src;
                let sv = self.value(src);
                let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                let gs = gs.reshape(sv.shape().to_vec()).expect("same size");
                self.acc(src, gs);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    let gp = g.slice_rows(start, start + rows).expect("in range");
                    let gp = gp.reshape(self.value(p).shape().to_vec()).expect("same size");
                    start += rows;
                    self.acc(p, gp);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                let n = targets.len() as f64;
                let scale = g.data()[0] / n;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl.row_mut(r)[t] -= 1.0;
                }
                let gl = gl.scale(scale);
                self.acc(logits, gl);
            }
            &Op::MseMean(a, b) => {
                let diff = self.value(a).sub(self.value(b)).expect("same shape");
                let k = 2.0 * g.data()[0] / diff.len() as f64;
                let ga = diff.scale(k);
                let gb = diff.scale(-k);
                self.acc(a, ga);
                self.acc(b, gb);
            }
        }
    }

    /// Adds every bound parameter's gradient into `params`' accumulators.
    pub fn accumulate_grads(&self, params: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pidx) } = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    params.grad_by_index_mut(pidx).add_assign(g);
                }
            }
        }
    }
}
