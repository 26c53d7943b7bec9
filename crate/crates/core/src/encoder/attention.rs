//! Scaled dot-product attention with key masking.

use super::tensor::{add_matmul_at, matmul, matmul_bt, Mat};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `[n × d_v]` weighted sums of value rows.
    pub context: Mat,
    /// `[n × m]` row-stochastic weights; masked keys carry exactly 0.
    pub weights: Mat,
}

/// `softmax(Q·Kᵀ/√d_k)·V` for `Q: [n × d_k]`, `K: [m × d_k]`, `V: [m × d_v]`.
/// Keys whose `key_valid` entry is false are excluded from the softmax.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, key_valid: Option<&[bool]>) -> Result<AttentionOutput> {
    if q.cols != k.cols || k.rows != v.rows {
        return Err(Error::Shape(format!(
            "attention Q [{}x{}], K [{}x{}], V [{}x{}]",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    if let Some(valid) = key_valid {
        if valid.len() != k.rows {
            return Err(Error::Shape(format!(
                "key mask of {} for {} keys",
                valid.len(),
                k.rows
            )));
        }
        if !valid.iter().any(|&b| b) {
            return Err(Error::Shape("every key is masked".into()));
        }
    }
    if k.rows == 0 {
        return Err(Error::Shape("attention over zero keys".into()));
    }
    let weights = attention_weights(q, k, key_valid);
    let context = matmul(&weights, &v.data, v.cols);
    Ok(AttentionOutput { context, weights })
}

pub(crate) fn attention_weights(q: &Mat, k: &Mat, key_valid: Option<&[bool]>) -> Mat {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut s = matmul_bt(q, &k.data, k.rows);
    for r in 0..s.rows {
        let row = s.row_mut(r);
        let mut max = f64::NEG_INFINITY;
        for (j, x) in row.iter_mut().enumerate() {
            if key_valid.is_some_and(|m| !m[j]) {
                *x = f64::NEG_INFINITY;
            } else {
                *x *= scale;
                max = max.max(*x);
            }
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    s
}

pub(crate) struct AttentionGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
}

/// Backward through `context = (P ∘ M)·V`, `P = softmax(Q·Kᵀ/√d_k)`, where
/// `M` is an optional dropout mask over the weights.
pub(crate) fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    probs: &Mat,
    drop: &Option<Vec<f64>>,
    dcontext: &Mat,
) -> AttentionGrads {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut dropped = probs.clone();
    if let Some(m) = drop {
        for (p, k) in dropped.data.iter_mut().zip(m) {
            *p *= k;
        }
    }
    let mut dv = Mat::zeros(v.rows, v.cols);
    add_matmul_at(&mut dv.data, &dropped, dcontext);
    let mut dp = matmul_bt(dcontext, &v.data, v.rows);
    if let Some(m) = drop {
        for (g, k) in dp.data.iter_mut().zip(m) {
            *g *= k;
        }
    }
    // softmax backward, then the 1/√d_k scale
    for r in 0..dp.rows {
        let p = probs.row(r);
        let dot: f64 = dp.row(r).iter().zip(p).map(|(a, b)| a * b).sum();
        for (g, &pv) in dp.row_mut(r).iter_mut().zip(p) {
            *g = pv * (*g - dot) * scale;
        }
    }
    let dq = matmul(&dp, &k.data, k.cols);
    let mut dk = Mat::zeros(k.rows, k.cols);
    add_matmul_at(&mut dk.data, &dp, q);
    AttentionGrads { dq, dk, dv }
}
