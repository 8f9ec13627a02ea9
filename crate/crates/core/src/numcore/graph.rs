//! Reverse-mode tape over the handful of ops the forecaster needs.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are pulled in
//! from a [`ParamStore`] by name (once per graph) and `backward` accumulates
//! their gradients straight back into the store.

use std::collections::HashMap;

use super::ops::{self, gelu, gelu_grad};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{NestError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RowMean { table: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, weights: Vec<f64> },
    Huber { pred: Var, target: Vec<f64>, delta: f64 },
    Pinball { pred: Var, target: Vec<f64>, tau: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NestError {
    NestError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    /// Pulls a named parameter onto the tape (cached per graph).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| NestError::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let t = store.by_index(idx).1.detached();
        let v = self.push(t, Op::Param(idx), true);
        self.params.insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x + row`, the row broadcast over every leading index of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(shape_err("add_row", xv, rv));
        }
        let mut out = xv.clone();
        let m = rv.len();
        let r = rv.data().to_vec();
        for chunk in out.data_mut().chunks_mut(m) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Mean of the selected table rows, as a `[1, d]` row.
    pub fn row_mean(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.cols();
        if rows.is_empty() || rows.iter().any(|&r| r >= tv.rows()) {
            return Err(NestError::InvalidArgument(format!(
                "row_mean indices {rows:?} out of range for table {:?}",
                tv.shape()
            )));
        }
        let mut acc = vec![0.0; d];
        for &r in rows {
            for (a, v) in acc.iter_mut().zip(tv.row(r)) {
                *a += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        let out = Tensor::matrix(1, d, acc)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::RowMean {
                table,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (a, b, d) = ops::check_attention_shapes(self.value(q), self.value(k), self.value(v))?;
        let res = ops::attention_raw(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            a,
            b,
            d,
        );
        let out = Tensor::matrix(a, d, res.output)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                weights: res.weights,
            },
            ng,
        ))
    }

    /// Mean Huber loss against a constant target.
    pub fn huber(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(NestError::Shape {
                op: "huber",
                left: pv.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        if delta <= 0.0 {
            return Err(NestError::InvalidArgument(format!("huber delta must be > 0, got {delta}")));
        }
        let n = pv.len().max(1) as f64;
        let loss: f64 = pv
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| ops::huber(p - t, delta))
            .sum::<f64>()
            / n;
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::full(&[1], loss),
            Op::Huber {
                pred,
                target: target.to_vec(),
                delta,
            },
            ng,
        ))
    }

    /// Mean pinball loss at level `tau` against a constant target.
    pub fn pinball(&mut self, pred: Var, target: &[f64], tau: f64) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(NestError::Shape {
                op: "pinball",
                left: pv.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(NestError::InvalidArgument(format!("quantile level {tau} outside (0,1)")));
        }
        let n = pv.len().max(1) as f64;
        let loss: f64 = pv
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| ops::pinball(t - p, tau))
            .sum::<f64>()
            / n;
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::full(&[1], loss),
            Op::Pinball {
                pred,
                target: target.to_vec(),
                tau,
            },
            ng,
        ))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| NestError::InvalidArgument("weighted_sum of nothing".into()))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut acc = vec![0.0; self.value(first.0).len()];
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("weighted_sum", self.value(first.0), t));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += w * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::new(shape, acc)?, Op::WeightedSum(terms.to_vec()), ng))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NestError::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => {
                    let (_, t) = store.by_index_mut(*idx);
                    t.set_requires_grad(true);
                    let tg = t.grad_mut().expect("requires grad");
                    tg.iter_mut().zip(&g).for_each(|(a, c)| *a += c);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    if self.needs(*a) {
                        acc(&mut grads, *a, ops::matmul_nt(&g, bv.data(), n, m, k));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, ops::matmul_tn(av.data(), &g, n, k, m));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let m = self.value(*row).len();
                        let mut colsum = vec![0.0; m];
                        for chunk in g.chunks(m) {
                            colsum.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                        }
                        acc(&mut grads, *row, colsum);
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, *x, g.iter().map(|v| v * s).collect());
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    acc(
                        &mut grads,
                        *x,
                        g.iter().zip(xv).map(|(gv, &xv)| gv * gelu_grad(xv)).collect(),
                    );
                }
                Op::RowMean { table, rows } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for (a, gv) in dt[r * d..(r + 1) * d].iter_mut().zip(&g) {
                            *a += gv * inv;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Attention { q, k, v, weights } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (a, b, d) = (qv.rows(), kv.rows(), qv.cols());
                    if self.needs(*v) {
                        acc(&mut grads, *v, ops::matmul_tn(weights, &g, a, b, d));
                    }
                    if self.needs(*q) || self.needs(*k) {
                        // dW = g Vᵀ; dS = W ⊙ (dW − rowsum(dW ⊙ W)) / √d
                        let dw = ops::matmul_nt(&g, vv.data(), a, d, b);
                        let scale = 1.0 / (d as f64).sqrt();
                        let mut ds = vec![0.0; a * b];
                        for i in 0..a {
                            let wr = &weights[i * b..(i + 1) * b];
                            let dr = &dw[i * b..(i + 1) * b];
                            let dot: f64 = wr.iter().zip(dr).map(|(x, y)| x * y).sum();
                            for j in 0..b {
                                ds[i * b + j] = wr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        if self.needs(*q) {
                            acc(&mut grads, *q, ops::matmul_raw_uncounted(&ds, kv.data(), a, b, d));
                        }
                        if self.needs(*k) {
                            acc(&mut grads, *k, ops::matmul_tn(&ds, qv.data(), a, b, d));
                        }
                    }
                }
                Op::Huber { pred, target, delta } => {
                    let pv = self.value(*pred).data();
                    let s = g[0] / pv.len().max(1) as f64;
                    acc(
                        &mut grads,
                        *pred,
                        pv.iter()
                            .zip(target)
                            .map(|(p, t)| s * ops::huber_grad(p - t, *delta))
                            .collect(),
                    );
                }
                Op::Pinball { pred, target, tau } => {
                    let pv = self.value(*pred).data();
                    let s = g[0] / pv.len().max(1) as f64;
                    acc(
                        &mut grads,
                        *pred,
                        pv.iter()
                            .zip(target)
                            .map(|(p, t)| -s * ops::pinball_grad(t - p, *tau))
                            .collect(),
                    );
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.needs(v) {
                            acc(&mut grads, v, g.iter().map(|x| x * w).collect());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
