//! Adapter, gating network and feed-forward block, each with its backward.

use crate::numerics::ops::{gelu, gelu_grad, linear, linear_backward, softmax};
use crate::numerics::{Real, Tensor2D};

/// Bottleneck adapter weights: `W1: d×b`, `b1: b`, `W2: b×d`, `b2: d`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterWeights<'a, T> {
    pub w1: &'a Tensor2D<T>,
    pub b1: &'a [T],
    pub w2: &'a Tensor2D<T>,
    pub b2: &'a [T],
    /// GELU between the two projections. Off by default.
    pub activation: bool,
}

#[derive(Clone, Debug)]
pub struct AdapterCache<T> {
    input: Tensor2D<T>,
    pre: Tensor2D<T>,
    hidden: Tensor2D<T>,
}

#[derive(Clone, Debug)]
pub struct AdapterGrads<T> {
    pub w1: Tensor2D<T>,
    pub b1: Tensor2D<T>,
    pub w2: Tensor2D<T>,
    pub b2: Tensor2D<T>,
}

/// `W2(W1·h + b1) + b2 + h`, row-wise.
pub fn adapter_forward<T: Real>(h: &Tensor2D<T>, p: &AdapterWeights<'_, T>) -> (Tensor2D<T>, AdapterCache<T>) {
    let pre = linear(h, p.w1, p.b1);
    let hidden = if p.activation { pre.map(gelu) } else { pre.clone() };
    let mut out = linear(&hidden, p.w2, p.b2);
    out.add_assign(h);
    (
        out,
        AdapterCache {
            input: h.clone(),
            pre,
            hidden,
        },
    )
}

pub fn adapter_backward<T: Real>(
    cache: &AdapterCache<T>,
    p: &AdapterWeights<'_, T>,
    dy: &Tensor2D<T>,
    want_params: bool,
) -> (Tensor2D<T>, Option<AdapterGrads<T>>) {
    let (mut dhidden, g2) = linear_backward(&cache.hidden, p.w2, dy, want_params);
    if p.activation {
        for (g, &x) in dhidden.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *g *= gelu_grad(x);
        }
    }
    let (mut dx, g1) = linear_backward(&cache.input, p.w1, &dhidden, want_params);
    dx.add_assign(dy);
    let grads = match (g1, g2) {
        (Some((w1, b1)), Some((w2, b2))) => Some(AdapterGrads { w1, b1, w2, b2 }),
        _ => None,
    };
    (dx, grads)
}

/// Per-row gate probabilities `β = softmax([q, p]·W_gate + b_gate)`.
#[derive(Clone, Debug)]
pub struct GateCache<T> {
    pub beta: Vec<[T; 2]>,
}

/// `h̃ = β₁·q + β₂·p` per row, with `W_gate: 2d×2`.
pub fn gate_fuse<T: Real>(
    q: &Tensor2D<T>,
    p: &Tensor2D<T>,
    w_gate: &Tensor2D<T>,
    b_gate: &[T],
) -> (Tensor2D<T>, GateCache<T>) {
    let (rows, d) = q.shape();
    assert_eq!(p.shape(), q.shape());
    assert_eq!(w_gate.shape(), (2 * d, 2));
    let mut out = Tensor2D::zeros(rows, d);
    let mut beta = Vec::with_capacity(rows);
    for r in 0..rows {
        let (qr, pr) = (q.row(r), p.row(r));
        let mut logits = [b_gate[0], b_gate[1]];
        for c in 0..d {
            logits[0] += qr[c] * w_gate.get(c, 0) + pr[c] * w_gate.get(d + c, 0);
            logits[1] += qr[c] * w_gate.get(c, 1) + pr[c] * w_gate.get(d + c, 1);
        }
        let b = softmax(&logits);
        let b = [b[0], b[1]];
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = b[0] * qr[c] + b[1] * pr[c];
        }
        beta.push(b);
    }
    (out, GateCache { beta })
}

/// Returns `(dq, dp, Option<(dW_gate, db_gate)>)`.
pub fn gate_backward<T: Real>(
    q: &Tensor2D<T>,
    p: &Tensor2D<T>,
    w_gate: &Tensor2D<T>,
    cache: &GateCache<T>,
    dy: &Tensor2D<T>,
    want_params: bool,
) -> (Tensor2D<T>, Tensor2D<T>, Option<(Tensor2D<T>, Tensor2D<T>)>) {
    let (rows, d) = q.shape();
    let mut dq = Tensor2D::zeros(rows, d);
    let mut dp = Tensor2D::zeros(rows, d);
    let mut dw = Tensor2D::zeros(2 * d, 2);
    let mut db = Tensor2D::zeros(1, 2);
    for r in 0..rows {
        let (qr, pr, dyr) = (q.row(r), p.row(r), dy.row(r));
        let b = cache.beta[r];
        let dbeta = [
            qr.iter().zip(dyr).map(|(&x, &g)| x * g).sum::<T>(),
            pr.iter().zip(dyr).map(|(&x, &g)| x * g).sum::<T>(),
        ];
        let dot = b[0] * dbeta[0] + b[1] * dbeta[1];
        let dl = [b[0] * (dbeta[0] - dot), b[1] * (dbeta[1] - dot)];
        let dqr = dq.row_mut(r);
        for c in 0..d {
            dqr[c] = b[0] * dyr[c] + dl[0] * w_gate.get(c, 0) + dl[1] * w_gate.get(c, 1);
        }
        let dpr = dp.row_mut(r);
        for c in 0..d {
            dpr[c] = b[1] * dyr[c] + dl[0] * w_gate.get(d + c, 0) + dl[1] * w_gate.get(d + c, 1);
        }
        if want_params {
            for c in 0..d {
                for k in 0..2 {
                    let v = dw.get(c, k) + qr[c] * dl[k];
                    dw.set(c, k, v);
                    let v = dw.get(d + c, k) + pr[c] * dl[k];
                    dw.set(d + c, k, v);
                }
            }
            let row = db.row_mut(0);
            row[0] += dl[0];
            row[1] += dl[1];
        }
    }
    (dq, dp, want_params.then_some((dw, db)))
}

/// Position-wise feed-forward block `W2·gelu(W1·x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FfnWeights<'a, T> {
    pub w1: &'a Tensor2D<T>,
    pub b1: &'a [T],
    pub w2: &'a Tensor2D<T>,
    pub b2: &'a [T],
}

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    pre: Tensor2D<T>,
}

pub fn ffn_forward<T: Real>(x: &Tensor2D<T>, p: &FfnWeights<'_, T>) -> (Tensor2D<T>, FfnCache<T>) {
    let pre = linear(x, p.w1, p.b1);
    let act = pre.map(gelu);
    let out = linear(&act, p.w2, p.b2);
    (out, FfnCache { pre })
}

/// Input gradient only; the block is always frozen.
pub fn ffn_backward<T: Real>(cache: &FfnCache<T>, p: &FfnWeights<'_, T>, dy: &Tensor2D<T>) -> Tensor2D<T> {
    let mut dact = dy.matmul_t(p.w2);
    for (g, &x) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        *g *= gelu_grad(x);
    }
    dact.matmul_t(p.w1)
}
