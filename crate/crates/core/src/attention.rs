//! Causal and context masks, and masked multi-head self-attention.
//!
//! Key columns are laid out as `[collab prefix (K_c) | tokens (T)]`; query
//! rows are tokens only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::numerics::ops::{linear, linear_backward};
use crate::numerics::{Real, Tensor2D};
use crate::{Error, Result};

/// Per-token item ordinal plus the number of collaborative prefix keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    segments: Vec<usize>,
    collab: usize,
}

impl SegmentMap {
    pub fn new(segments: Vec<usize>, collab: usize) -> Self {
        Self { segments, collab }
    }

    pub fn with_collab(mut self, collab: usize) -> Self {
        self.collab = collab;
        self
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    /// `T`, the number of query tokens.
    pub fn query_count(&self) -> usize {
        self.segments.len()
    }

    /// `K_c`, the number of collaborative key positions.
    pub fn collab_count(&self) -> usize {
        self.collab
    }

    pub fn key_count(&self) -> usize {
        self.collab + self.segments.len()
    }

    pub fn same_item(&self, query: usize, token_key: usize) -> bool {
        self.segments[query] == self.segments[token_key]
    }
}

/// Query × key visibility; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of collaborative key columns in front of the token keys.
    pub fn collab_count(&self) -> usize {
        self.cols - self.rows
    }

    #[inline]
    pub fn visible(&self, query: usize, key: usize) -> bool {
        self.bits[query * self.cols + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.bits[query * self.cols..(query + 1) * self.cols]
    }

    /// 0/1 grid, one line per query row.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for &b in self.row(r) {
                s.push(if b { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let cols = lines.first().map_or(0, |l| l.trim().len());
        let mut bits = Vec::with_capacity(lines.len() * cols);
        for (i, line) in lines.iter().enumerate() {
            let line = line.trim();
            if line.len() != cols {
                return Err(Error::Shape(format!("mask row {i} has {} columns, expected {cols}", line.len())));
            }
            for ch in line.chars() {
                bits.push(match ch {
                    '1' => true,
                    '0' => false,
                    other => return Err(Error::Invalid(format!("mask cell {other:?}"))),
                });
            }
        }
        let m = Self {
            rows: lines.len(),
            cols,
            bits,
        };
        if m.cols < m.rows {
            return Err(Error::Shape("mask has fewer columns than rows".into()));
        }
        Ok(m)
    }
}

impl std::fmt::Display for MaskMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Query `t` sees token keys at positions `≤ t`; collaborative keys are hidden.
pub fn build_causal_mask(seg: &SegmentMap) -> MaskMatrix {
    let kc = seg.collab_count();
    MaskMatrix::from_fn(seg.query_count(), seg.key_count(), |q, k| {
        k >= kc && k - kc <= q
    })
}

/// Query `t` sees token keys of its own item and every collaborative key.
pub fn build_context_mask(seg: &SegmentMap) -> MaskMatrix {
    let kc = seg.collab_count();
    MaskMatrix::from_fn(seg.query_count(), seg.key_count(), |q, k| {
        k < kc || seg.same_item(q, k - kc)
    })
}

/// Borrowed attention weights. Projections are `d × d`, biases length `d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'a, T> {
    pub wq: &'a Tensor2D<T>,
    pub bq: &'a [T],
    pub wk: &'a Tensor2D<T>,
    pub bk: &'a [T],
    pub wv: &'a Tensor2D<T>,
    pub bv: &'a [T],
    pub wo: &'a Tensor2D<T>,
    pub bo: &'a [T],
    pub heads: usize,
}

/// Gradients for every tensor in [`AttentionParams`], same order.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub wq: Tensor2D<T>,
    pub bq: Tensor2D<T>,
    pub wk: Tensor2D<T>,
    pub bk: Tensor2D<T>,
    pub wv: Tensor2D<T>,
    pub bv: Tensor2D<T>,
    pub wo: Tensor2D<T>,
    pub bo: Tensor2D<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    keys_in: Tensor2D<T>,
    q: Tensor2D<T>,
    k: Tensor2D<T>,
    v: Tensor2D<T>,
    /// Per-head attention weights, `T × (K_c + T)`.
    weights: Vec<Tensor2D<T>>,
    mixed: Tensor2D<T>,
}

impl<T: Real> AttentionCache<T> {
    pub fn weights(&self) -> &[Tensor2D<T>] {
        &self.weights
    }
}

/// Softmax over the visible entries of `scores`; hidden entries get exactly 0.
fn masked_softmax_row<T: Real>(scores: &mut [T], visible: &[bool]) {
    let mut max = T::neg_infinity();
    for (&s, &v) in scores.iter().zip(visible) {
        if v && s > max {
            max = s;
        }
    }
    assert!(max > T::neg_infinity(), "query row with no visible key");
    let mut sum = T::zero();
    for (s, &v) in scores.iter_mut().zip(visible) {
        if v {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = T::zero();
        }
    }
    scores.iter_mut().for_each(|s| *s /= sum);
}

/// `Linear(Softmax(Q Kᵀ/√d_head, masked) V)` for the token rows of `keys_in`.
///
/// `keys_in` holds `K_c + T` rows; the last `T` rows are the query tokens.
pub fn masked_self_attention<T: Real>(
    keys_in: &Tensor2D<T>,
    mask: &MaskMatrix,
    p: &AttentionParams<'_, T>,
) -> (Tensor2D<T>, AttentionCache<T>) {
    let s_len = keys_in.rows();
    let t_len = mask.rows();
    assert_eq!(mask.cols(), s_len, "mask columns must match key rows");
    let kc = s_len - t_len;
    let d = keys_in.cols();
    assert!(p.heads >= 1 && d.is_multiple_of(p.heads), "heads must divide d");
    let dh = d / p.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let queries = keys_in.slice_rows(kc, s_len);
    let q = linear(&queries, p.wq, p.bq);
    let k = linear(keys_in, p.wk, p.bk);
    let v = linear(keys_in, p.wv, p.bv);

    let mut mixed = Tensor2D::zeros(t_len, d);
    let mut weights = Vec::with_capacity(p.heads);
    let mut head_out = Tensor2D::zeros(t_len, dh);
    for h in 0..p.heads {
        let off = h * dh;
        let mut a = Tensor2D::zeros(t_len, s_len);
        T::gemm(
            t_len,
            dh,
            s_len,
            &q.as_slice()[off..],
            d as isize,
            1,
            &k.as_slice()[off..],
            1,
            d as isize,
            T::zero(),
            a.as_mut_slice(),
        );
        for r in 0..t_len {
            let row = a.row_mut(r);
            row.iter_mut().for_each(|x| *x *= scale);
            masked_softmax_row(row, mask.row(r));
        }
        T::gemm(
            t_len,
            s_len,
            dh,
            a.as_slice(),
            s_len as isize,
            1,
            &v.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            head_out.as_mut_slice(),
        );
        for r in 0..t_len {
            mixed.row_mut(r)[off..off + dh].copy_from_slice(head_out.row(r));
        }
        weights.push(a);
    }
    let out = linear(&mixed, p.wo, p.bo);
    (
        out,
        AttentionCache {
            keys_in: keys_in.clone(),
            q,
            k,
            v,
            weights,
            mixed,
        },
    )
}

/// Returns the gradient with respect to all `K_c + T` input rows, and the
/// parameter gradients when `want_params` is set.
pub fn masked_self_attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    p: &AttentionParams<'_, T>,
    d_out: &Tensor2D<T>,
    want_params: bool,
) -> (Tensor2D<T>, Option<AttentionGrads<T>>) {
    let s_len = cache.keys_in.rows();
    let t_len = d_out.rows();
    let kc = s_len - t_len;
    let d = cache.keys_in.cols();
    let dh = d / p.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let (d_mixed, out_grads) = linear_backward(&cache.mixed, p.wo, d_out, want_params);
    let mut dq = Tensor2D::zeros(t_len, d);
    let mut dk = Tensor2D::zeros(s_len, d);
    let mut dv = Tensor2D::zeros(s_len, d);
    let mut da = Tensor2D::zeros(t_len, s_len);
    let mut tmp_t = Tensor2D::zeros(t_len, dh);
    let mut tmp_s = Tensor2D::zeros(s_len, dh);
    for h in 0..p.heads {
        let off = h * dh;
        let a = &cache.weights[h];
        // dA = dO_h · V_hᵀ
        T::gemm(
            t_len,
            dh,
            s_len,
            &d_mixed.as_slice()[off..],
            d as isize,
            1,
            &cache.v.as_slice()[off..],
            1,
            d as isize,
            T::zero(),
            da.as_mut_slice(),
        );
        // dV_h = Aᵀ · dO_h
        T::gemm(
            s_len,
            t_len,
            dh,
            a.as_slice(),
            1,
            s_len as isize,
            &d_mixed.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            tmp_s.as_mut_slice(),
        );
        for r in 0..s_len {
            for (o, &x) in dv.row_mut(r)[off..off + dh].iter_mut().zip(tmp_s.row(r)) {
                *o += x;
            }
        }
        // softmax backward, then fold in the score scale
        for r in 0..t_len {
            let ar = a.row(r);
            let dr = da.row_mut(r);
            let dot: T = ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
            for (g, &w) in dr.iter_mut().zip(ar) {
                *g = w * (*g - dot) * scale;
            }
        }
        // dQ_h = dS · K_h
        T::gemm(
            t_len,
            s_len,
            dh,
            da.as_slice(),
            s_len as isize,
            1,
            &cache.k.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            tmp_t.as_mut_slice(),
        );
        for r in 0..t_len {
            dq.row_mut(r)[off..off + dh].copy_from_slice(tmp_t.row(r));
        }
        // dK_h = dSᵀ · Q_h
        T::gemm(
            s_len,
            t_len,
            dh,
            da.as_slice(),
            1,
            s_len as isize,
            &cache.q.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            tmp_s.as_mut_slice(),
        );
        for r in 0..s_len {
            for (o, &x) in dk.row_mut(r)[off..off + dh].iter_mut().zip(tmp_s.row(r)) {
                *o += x;
            }
        }
    }
    let queries = cache.keys_in.slice_rows(kc, s_len);
    let (dx_q, q_grads) = linear_backward(&queries, p.wq, &dq, want_params);
    let (mut dx, k_grads) = linear_backward(&cache.keys_in, p.wk, &dk, want_params);
    let (dx_v, v_grads) = linear_backward(&cache.keys_in, p.wv, &dv, want_params);
    dx.add_assign(&dx_v);
    for r in 0..t_len {
        for (o, &x) in dx.row_mut(kc + r).iter_mut().zip(dx_q.row(r)) {
            *o += x;
        }
    }
    let grads = match (q_grads, k_grads, v_grads, out_grads) {
        (Some((wq, bq)), Some((wk, bk)), Some((wv, bv)), Some((wo, bo))) => Some(AttentionGrads {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }),
        _ => None,
    };
    (dx, grads)
}

/// Renders a mask with row/column labels for debugging.
pub fn describe_mask(mask: &MaskMatrix) -> String {
    let mut s = String::new();
    let kc = mask.collab_count();
    let _ = writeln!(s, "{} queries, {} collab keys", mask.rows(), kc);
    s.push_str(&mask.to_text());
    s
}
