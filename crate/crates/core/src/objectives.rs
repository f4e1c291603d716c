//! Loss terms and their weighted combination. Every term is reduced by the
//! arithmetic mean over its batch.

use serde::{Deserialize, Serialize};

use crate::numerics::ops::{cosine_with_grad, cross_entropy_with_logits, log_sigmoid, sigmoid};
use crate::numerics::{Real, Tensor2D};
use crate::{Error, Result};

/// `λ1` (alignment), `λ2` (contrastive), `λ3` (collaborative).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub cl: f64,
    pub cf: f64,
}

impl Default for LossWeights {
    /// Arts values.
    fn default() -> Self {
        Self {
            align: 0.1,
            cl: 1e-6,
            cf: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_seq: f64,
    pub l_align: f64,
    pub l_cl: f64,
    pub l_cf: f64,
    pub total: f64,
}

/// `L = L_seq + λ1·L_align + λ2·L_cl + λ3·L_cf`
pub fn total_loss(l_seq: f64, l_align: f64, l_cl: f64, l_cf: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_seq,
        l_align,
        l_cl,
        l_cf,
        total: l_seq + w.align * l_align + w.cl * l_cl + w.cf * l_cf,
    }
}

/// Mean loss with gradients for the hidden rows and the item head.
#[derive(Clone, Debug)]
pub struct HeadLoss<T> {
    pub loss: T,
    pub d_hidden: Tensor2D<T>,
    pub d_w: Tensor2D<T>,
    pub d_b: Tensor2D<T>,
    pub count: usize,
}

/// Mean cross-entropy of `softmax(h·W + b)` against per-row targets.
/// Rows with no target are skipped and contribute no gradient.
pub fn head_cross_entropy<T: Real>(
    hidden: &Tensor2D<T>,
    targets: &[Option<usize>],
    w: &Tensor2D<T>,
    b: &[T],
) -> Result<HeadLoss<T>> {
    if hidden.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} hidden rows for {} targets",
            hidden.rows(),
            targets.len()
        )));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    let mut d_hidden = Tensor2D::zeros(hidden.rows(), hidden.cols());
    let mut d_w = Tensor2D::zeros(w.rows(), w.cols());
    let mut d_b = Tensor2D::zeros(1, w.cols());
    if count == 0 {
        return Ok(HeadLoss {
            loss: T::zero(),
            d_hidden,
            d_w,
            d_b,
            count,
        });
    }
    let inv = T::one() / T::lit(count as f64);
    let mut logits = hidden.matmul(w);
    logits.add_row_broadcast(b);
    let mut d_logits = Tensor2D::zeros(hidden.rows(), w.cols());
    let mut loss = T::zero();
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let (l, g) = cross_entropy_with_logits(logits.row(r), t)?;
            loss += l * inv;
            for (o, &x) in d_logits.row_mut(r).iter_mut().zip(&g) {
                *o = x * inv;
            }
        }
    }
    d_hidden.add_assign(&d_logits.matmul_t(w));
    hidden.t_matmul_into(&d_logits, &mut d_w);
    d_b.add_assign(&d_logits.sum_rows());
    Ok(HeadLoss {
        loss,
        d_hidden,
        d_w,
        d_b,
        count,
    })
}

/// Alignment: each `[ALIGN]` state should project onto its own item id.
pub fn align_loss<T: Real>(h_align: &Tensor2D<T>, items: &[usize], w: &Tensor2D<T>, b: &[T]) -> Result<HeadLoss<T>> {
    let targets: Vec<Option<usize>> = items.iter().map(|&i| Some(i)).collect();
    head_cross_entropy(h_align, &targets, w, b)
}

/// Next-item linking: the `[SEQ]` state of position `j` predicts `targets[j]`.
pub fn seq_loss<T: Real>(h_seq: &Tensor2D<T>, targets: &[Option<usize>], w: &Tensor2D<T>, b: &[T]) -> Result<HeadLoss<T>> {
    head_cross_entropy(h_seq, targets, w, b)
}

#[derive(Clone, Debug)]
pub struct InfoNceGrad<T> {
    pub loss: T,
    pub d_anchor: Vec<T>,
    pub d_positive: Vec<T>,
    pub d_negatives: Vec<Vec<T>>,
}

/// `−ln f⁺ / (f⁺ + Σ f⁻)` with `f = exp(cos(·,·)/τ)`.
pub fn infonce_loss<T: Real>(anchor: &[T], positive: &[T], negatives: &[&[T]], tau: T) -> Result<InfoNceGrad<T>> {
    if tau <= T::zero() {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    if negatives.is_empty() {
        return Err(Error::Invalid("InfoNCE needs at least one negative".into()));
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    let mut grads = Vec::with_capacity(negatives.len() + 1);
    for other in std::iter::once(positive).chain(negatives.iter().copied()) {
        let (s, da, db) = cosine_with_grad(anchor, other)?;
        sims.push(s / tau);
        grads.push((da, db));
    }
    let max = sims.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let z: T = sims.iter().map(|&s| (s - max).exp()).sum();
    let loss = max + z.ln() - sims[0];
    // dL/dsim_k = (softmax_k − [k = 0]) / τ
    let mut d_anchor = vec![T::zero(); anchor.len()];
    let mut d_others = Vec::with_capacity(sims.len());
    for (k, (s, (da, db))) in sims.iter().zip(&grads).enumerate() {
        let mut coeff = (*s - max).exp() / z;
        if k == 0 {
            coeff -= T::one();
        }
        coeff /= tau;
        for (o, &g) in d_anchor.iter_mut().zip(da) {
            *o += coeff * g;
        }
        d_others.push(db.iter().map(|&g| coeff * g).collect::<Vec<T>>());
    }
    let d_positive = d_others.remove(0);
    Ok(InfoNceGrad {
        loss,
        d_anchor,
        d_positive,
        d_negatives: d_others,
    })
}

#[derive(Clone, Debug)]
pub struct BprGrad<T> {
    pub loss: T,
    pub d_user: Vec<T>,
    pub d_pos: Vec<T>,
    pub d_neg: Vec<T>,
}

/// `−ln σ(⟨u, pos⟩ − ⟨u, neg⟩)`
pub fn bpr_loss<T: Real>(user: &[T], pos: &[T], neg: &[T]) -> BprGrad<T> {
    let gap: T = user
        .iter()
        .zip(pos.iter().zip(neg))
        .map(|(&u, (&p, &n))| u * (p - n))
        .sum();
    let loss = -log_sigmoid(gap);
    let coeff = -sigmoid(-gap);
    BprGrad {
        loss,
        d_user: pos.iter().zip(neg).map(|(&p, &n)| coeff * (p - n)).collect(),
        d_pos: user.iter().map(|&u| coeff * u).collect(),
        d_neg: user.iter().map(|&u| -coeff * u).collect(),
    }
}

/// [`bpr_loss`] by index into user and item tables.
pub fn bpr_triple<T: Real>(
    users: &Tensor2D<T>,
    items: &Tensor2D<T>,
    user: usize,
    pos: usize,
    neg: usize,
) -> Result<BprGrad<T>> {
    if pos == neg {
        return Err(Error::Invalid(format!("BPR positive and negative are both item {pos}")));
    }
    for (i, n) in [(user, users.rows()), (pos, items.rows()), (neg, items.rows())] {
        if i >= n {
            return Err(Error::OutOfRange { index: i, len: n });
        }
    }
    Ok(bpr_loss(users.row(user), items.row(pos), items.row(neg)))
}
