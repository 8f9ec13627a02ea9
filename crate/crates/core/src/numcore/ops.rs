//! Value-semantics kernels shared by the tape and by direct callers.
//!
//! Every forward multiply-add performed by `matmul` and the attention kernel
//! is tallied in a thread-local counter so cost models can be checked against
//! what actually runs.

use std::cell::Cell;

use super::tensor::Tensor;
use crate::error::{NestError, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static ATTN_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Forward multiply-adds counted on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

/// The part of [`mac_count`] spent inside attention kernels (`QKᵀ` and `WV`).
pub fn attention_mac_count() -> u64 {
    ATTN_MACS.with(Cell::get)
}

/// Resets both counters.
pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
    ATTN_MACS.with(|c| c.set(0));
}

fn count_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// `a[n,k] * b[k,m]` on raw row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    count_macs((n * k * m) as u64);
    matmul_raw_uncounted(a, b, n, k, m)
}

pub(crate) fn matmul_raw_uncounted(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ[k,n] * b[n,m]` without materialising the transpose (backward helper, uncounted).
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n,k] * bᵀ` where `b` is `[m,k]` (backward helper, uncounted).
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    if b.shape().len() != 2 || b.shape()[0] != k {
        return Err(NestError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let m = b.cols();
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = m;
    Tensor::new(shape, matmul_raw(a.data(), b.data(), n, k, m))
}

/// `y = xW + b`, with `b` broadcast over all leading rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if b.len() != w.cols() {
        return Err(NestError::Shape {
            op: "linear bias",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let m = b.len();
    for row in y.data_mut().chunks_mut(m) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

/// In-place row softmax with row-max subtraction.
pub(crate) fn softmax_rows(scores: &mut [f64], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Attention output together with the softmax weight matrix (`a × b`).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Vec<f64>,
    pub weights: Vec<f64>,
}

pub(crate) fn attention_raw(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    a: usize,
    b: usize,
    d: usize,
) -> AttentionOutput {
    count_macs((2 * a * b * d) as u64);
    ATTN_MACS.with(|c| c.set(c.get() + (2 * a * b * d) as u64));
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; a * b];
    for i in 0..a {
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..b {
            let kj = &k[j * d..(j + 1) * d];
            weights[i * b + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
        }
    }
    softmax_rows(&mut weights, b);
    let mut output = vec![0.0; a * d];
    for i in 0..a {
        let orow = &mut output[i * d..(i + 1) * d];
        for j in 0..b {
            let w = weights[i * b + j];
            for (o, vv) in orow.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vv;
            }
        }
    }
    AttentionOutput { output, weights }
}

pub(crate) fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let shape_err = || NestError::Shape {
        op: "attention",
        left: q.shape().to_vec(),
        right: [k.shape(), v.shape()].concat(),
    };
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(shape_err());
    }
    let (a, d) = (q.rows(), q.cols());
    let b = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != b {
        return Err(shape_err());
    }
    if d == 0 || b == 0 {
        return Err(NestError::InvalidArgument(format!(
            "attention needs d > 0 and at least one key (d={d}, keys={b})"
        )));
    }
    Ok((a, b, d))
}

/// `softmax(QKᵀ/√d) V`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(scaled_dot_attention_with_weights(q, k, v)?.0)
}

/// Same as [`scaled_dot_attention`] but also returns the `a × b` weight matrix.
pub fn scaled_dot_attention_with_weights(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (a, b, d) = check_attention_shapes(q, k, v)?;
    let out = attention_raw(q.data(), k.data(), v.data(), a, b, d);
    Ok((
        Tensor::matrix(a, d, out.output)?,
        Tensor::matrix(a, b, out.weights)?,
    ))
}

/// Huber penalty of a single residual.
pub fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

pub(crate) fn huber_grad(e: f64, delta: f64) -> f64 {
    e.clamp(-delta, delta)
}

/// Pinball (quantile) penalty `max(τe, (τ−1)e)` of a residual `e = target − prediction`.
pub fn pinball(e: f64, tau: f64) -> f64 {
    (tau * e).max((tau - 1.0) * e)
}

pub(crate) fn pinball_grad(e: f64, tau: f64) -> f64 {
    if e > 0.0 {
        tau
    } else if e < 0.0 {
        tau - 1.0
    } else {
        tau - 0.5
    }
}

/// tanh-approximated GELU and its derivative.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
