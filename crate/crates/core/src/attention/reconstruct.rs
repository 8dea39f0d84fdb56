//! Offline reconstruction of final-layer attention from captured Q/K
//! projections: head reshape, rotary embedding, GQA expansion and causal
//! softmax.

use ndarray::{s, Array2, Array3, ArrayView1, Axis};

use super::AttentionCapture;
use crate::error::{contract, Error, Result};

/// Splits `[T × n·d_h]` projections into `[n × T × d_h]` heads, head `h`
/// taking columns `h·d_h .. (h+1)·d_h`.
pub fn split_heads(x: &Array2<f32>, n_heads: usize, head_dim: usize) -> Result<Array3<f64>> {
    let (t, width) = x.dim();
    if width != n_heads * head_dim {
        return Err(Error::Shape(format!(
            "projection width {width} != {n_heads} heads × {head_dim}"
        )));
    }
    Ok(Array3::from_shape_fn((n_heads, t, head_dim), |(h, i, j)| {
        x[[i, h * head_dim + j]] as f64
    }))
}

/// Rotary position embedding in rotate-half form:
/// `x·cos + rotate_half(x)·sin` with `rotate_half([a, b]) = [-b, a]`.
pub fn apply_rope(
    q_heads: &Array3<f64>,
    k_heads: &Array3<f64>,
    cos: &Array2<f32>,
    sin: &Array2<f32>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    Ok((rope_one(q_heads, cos, sin, "Q")?, rope_one(k_heads, cos, sin, "K")?))
}

fn rope_one(x: &Array3<f64>, cos: &Array2<f32>, sin: &Array2<f32>, name: &str) -> Result<Array3<f64>> {
    let (_, t, d) = x.dim();
    if d % 2 != 0 {
        return contract(format!("head_dim {d} must be even for rotary embedding"));
    }
    if cos.dim() != sin.dim() {
        return Err(Error::Shape(format!(
            "cos table {:?} and sin table {:?} differ",
            cos.dim(),
            sin.dim()
        )));
    }
    let (rows, cols) = cos.dim();
    if rows < t || cols != d {
        return Err(Error::Shape(format!(
            "rotary tables {rows}×{cols} do not cover {name} with T={t}, d_h={d}"
        )));
    }
    let half = d / 2;
    let mut out = Array3::<f64>::zeros(x.dim());
    for ((h, i, j), v) in out.indexed_iter_mut() {
        let rotated = if j < half {
            -x[[h, i, j + half]]
        } else {
            x[[h, i, j - half]]
        };
        *v = x[[h, i, j]] * cos[[i, j]] as f64 + rotated * sin[[i, j]] as f64;
    }
    Ok(out)
}

/// Query-to-KV head ratio; errors when `n_kv` does not divide `n_heads`.
pub fn gqa_ratio(n_heads: usize, n_kv_heads: usize) -> Result<usize> {
    if n_kv_heads == 0 || n_heads == 0 || n_heads % n_kv_heads != 0 {
        return contract(format!(
            "n_kv_heads {n_kv_heads} must divide n_heads {n_heads}"
        ));
    }
    Ok(n_heads / n_kv_heads)
}

/// Repeat-interleave KV heads: output head `i` is input head `i / ratio`.
pub fn expand_gqa(k_heads: &Array3<f64>, ratio: usize) -> Result<Array3<f64>> {
    if ratio == 0 {
        return contract("GQA ratio must be positive");
    }
    let (n_kv, t, d) = k_heads.dim();
    Ok(Array3::from_shape_fn((n_kv * ratio, t, d), |(h, i, j)| {
        k_heads[[h / ratio, i, j]]
    }))
}

/// Rotated, expanded projections ready for row-wise attention.
pub struct PreparedAttention {
    q: Array3<f64>,
    k: Array3<f64>,
    alpha: f64,
}

impl PreparedAttention {
    pub fn new(capture: &AttentionCapture) -> Result<Self> {
        capture.validate()?;
        let q = split_heads(&capture.q, capture.n_heads, capture.head_dim)?;
        let k = split_heads(&capture.k, capture.n_kv_heads, capture.head_dim)?;
        let (q, k) = apply_rope(&q, &k, &capture.cos, &capture.sin)?;
        let ratio = gqa_ratio(capture.n_heads, capture.n_kv_heads)?;
        let k = if ratio > 1 { expand_gqa(&k, ratio)? } else { k };
        Ok(Self {
            q,
            k,
            alpha: capture.alpha,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.q.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.q.dim().1
    }

    /// Softmax row for query `i` of head `h`; keys after `i` get zero weight.
    pub fn row(&self, h: usize, i: usize) -> Vec<f64> {
        let t = self.seq_len();
        let query: ArrayView1<f64> = self.q.slice(s![h, i, ..]);
        let keys = self.k.slice(s![h, ..=i, ..]);
        let logits: Vec<f64> = keys
            .axis_iter(Axis(0))
            .map(|key| self.alpha * query.dot(&key))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut row = vec![0.0; t];
        for (dst, e) in row.iter_mut().zip(&exps) {
            *dst = e / total;
        }
        row
    }

    /// Head-averaged softmax row for query `i`.
    pub fn head_mean_row(&self, i: usize) -> Vec<f64> {
        let n = self.n_heads();
        let mut acc = vec![0.0; self.seq_len()];
        for h in 0..n {
            for (a, v) in acc.iter_mut().zip(self.row(h, i)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    }
}

/// Full per-head attention `[n_h × T × T]`:
/// `softmax(α · Q_rope · K_ropeᵀ + causal mask)` row-wise.
pub fn reconstruct_attention(capture: &AttentionCapture) -> Result<Array3<f64>> {
    let prep = PreparedAttention::new(capture)?;
    let (n, t) = (prep.n_heads(), prep.seq_len());
    let mut out = Array3::<f64>::zeros((n, t, t));
    for h in 0..n {
        for i in 0..t {
            let row = prep.row(h, i);
            out.slice_mut(s![h, i, ..])
                .iter_mut()
                .zip(row)
                .for_each(|(d, v)| *d = v);
        }
    }
    Ok(out)
}
