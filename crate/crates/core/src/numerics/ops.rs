//! Differentiable primitives. Each forward has a matching backward that
//! maps an upstream gradient to input (and parameter) gradients.

use super::{Real, Tensor2D};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut out: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Backward of softmax given its output `p` and upstream `dp`.
pub fn softmax_backward<T: Real>(p: &[T], dp: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - dot)).collect()
}

pub fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// `−ln dist[target]`.
pub fn cross_entropy<T: Real>(dist: &[T], target: usize) -> Result<T> {
    let p = *dist.get(target).ok_or(Error::OutOfRange {
        index: target,
        len: dist.len(),
    })?;
    Ok(-p.ln())
}

/// Cross-entropy of `softmax(logits)` against `target`, with the gradient
/// with respect to the logits (`softmax − onehot`).
pub fn cross_entropy_with_logits<T: Real>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad: Vec<T> = logits.iter().map(|&x| (x - lse).exp()).collect();
    grad[target] -= T::one();
    Ok((loss, grad))
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    Ok(cosine_with_grad(a, b)?.0)
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn cosine_with_grad<T: Real>(a: &[T], b: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let s = dot(a, b) / (na * nb);
    let s = s.max(-T::one()).min(T::one());
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - s * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - s * y / (nb * nb))
        .collect();
    Ok((s, da, db))
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x)` without overflow for large |x|.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.044715;

/// tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Single-vector layer norm: `gain ⊙ (v − μ)/√(σ² + ε) + bias`.
pub fn layer_norm<T: Real>(v: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    let x = Tensor2D::row_vector(v);
    LayerNormCache::forward(&x, gain, bias).0.into_vec()
}

/// Saved statistics of a row-wise layer norm.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    normalized: Tensor2D<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNormCache<T> {
    pub fn forward(x: &Tensor2D<T>, gain: &[T], bias: &[T]) -> (Tensor2D<T>, Self) {
        let (rows, cols) = x.shape();
        assert_eq!(gain.len(), cols);
        assert_eq!(bias.len(), cols);
        let n = T::lit(cols as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut normalized = Tensor2D::zeros(rows, cols);
        let mut out = Tensor2D::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let nr = normalized.row_mut(r);
            for (o, &v) in nr.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let nr = normalized.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = gain[c] * nr[c] + bias[c];
            }
        }
        (out, Self { normalized, inv_std })
    }

    pub fn normalized(&self) -> &Tensor2D<T> {
        &self.normalized
    }

    /// Returns `(dx, dgain, dbias)`.
    pub fn backward(&self, gain: &[T], dy: &Tensor2D<T>) -> (Tensor2D<T>, Vec<T>, Vec<T>) {
        let (rows, cols) = dy.shape();
        let n = T::lit(cols as f64);
        let mut dx = Tensor2D::zeros(rows, cols);
        let mut dgain = vec![T::zero(); cols];
        let mut dbias = vec![T::zero(); cols];
        let mut dxhat = vec![T::zero(); cols];
        for r in 0..rows {
            let xh = self.normalized.row(r);
            let dyr = dy.row(r);
            for c in 0..cols {
                dgain[c] += dyr[c] * xh[c];
                dbias[c] += dyr[c];
                dxhat[c] = dyr[c] * gain[c];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
            let is = self.inv_std[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        (dx, dgain, dbias)
    }
}

/// `x · w + b` with `w` of shape in×out and `b` of length out.
pub fn linear<T: Real>(x: &Tensor2D<T>, w: &Tensor2D<T>, b: &[T]) -> Tensor2D<T> {
    let mut y = x.matmul(w);
    y.add_row_broadcast(b);
    y
}

/// Gradients of [`linear`]: `dx`, and `(dw, db)` when requested.
pub fn linear_backward<T: Real>(
    x: &Tensor2D<T>,
    w: &Tensor2D<T>,
    dy: &Tensor2D<T>,
    want_params: bool,
) -> (Tensor2D<T>, Option<(Tensor2D<T>, Tensor2D<T>)>) {
    let dx = dy.matmul_t(w);
    let params = want_params.then(|| (x.t_matmul(dy), dy.sum_rows()));
    (dx, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::numeric_gradient;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        for p in softmax(&[1.0f64, 1.0, 1.0]) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cross_entropy(&[0.25f64; 4], 2).unwrap(),
            4f64.ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            cross_entropy(&[0.25, 0.75], 1).unwrap(),
            -(0.75f64.ln()),
            epsilon = 1e-15
        );
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(Error::OutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn cosine_examples() {
        let v = [1.0, -2.0, 0.5];
        assert_abs_diff_eq!(cosine_similarity(&v, &v).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(cosine_similarity(&v, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        assert_eq!(layer_norm(&[3.0; 4], &ones, &zeros), vec![0.0; 4]);

        let v = [1.0, -1.0, 1.0, -1.0];
        let out = layer_norm(&v, &ones, &zeros);
        for (a, b) in out.iter().zip(&v) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }

        let x = [0.3, -1.2, 2.5, 0.1];
        let scaled: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let a = layer_norm(&x, &ones, &zeros);
        let b = layer_norm(&scaled, &ones, &zeros);
        for (p, q) in a.iter().zip(&b) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-5);
        }
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_abs_diff_eq!(log_sigmoid(0.0f64), -(2f64.ln()), epsilon = 1e-15);
        assert!(log_sigmoid(-800.0f64).is_finite());
        assert_eq!(log_sigmoid(800.0f64), 0.0);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let p = softmax(&v);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(v in prop::collection::vec(-5.0f64..5.0, 2..10), t in 0usize..10) {
            let t = t % v.len();
            let (loss, _) = cross_entropy_with_logits(&v, t).unwrap();
            prop_assert!(loss >= 0.0);
        }

        #[test]
        fn primitive_gradients_match_central_differences(
            x in prop::collection::vec(-2.0f64..2.0, 6),
            y in prop::collection::vec(-2.0f64..2.0, 6),
            g in prop::collection::vec(-2.0f64..2.0, 6),
        ) {
            // softmax against a fixed linear read-out
            let p = softmax(&x);
            let analytic = softmax_backward(&p, &g);
            let numeric = numeric_gradient(|v| dot(&softmax(v), &g), &x, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                prop_assert!(rel_err(*a, *n) < 1e-5 || (a - n).abs() < 1e-9);
            }

            // cross-entropy with logits
            let (_, analytic) = cross_entropy_with_logits(&x, 2).unwrap();
            let numeric = numeric_gradient(|v| cross_entropy_with_logits(v, 2).unwrap().0, &x, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                prop_assert!(rel_err(*a, *n) < 1e-5 || (a - n).abs() < 1e-9);
            }

            // cosine
            if norm(&x) > 0.1 && norm(&y) > 0.1 {
                let (_, da, db) = cosine_with_grad(&x, &y).unwrap();
                let na = numeric_gradient(|v| cosine_similarity(v, &y).unwrap(), &x, 1e-5);
                let nb = numeric_gradient(|v| cosine_similarity(&x, v).unwrap(), &y, 1e-5);
                for (a, n) in da.iter().zip(&na).chain(db.iter().zip(&nb)) {
                    prop_assert!(rel_err(*a, *n) < 1e-5 || (a - n).abs() < 1e-9);
                }
            }

            // gelu
            for &v in &x {
                let n = (gelu(v + 1e-5) - gelu(v - 1e-5)) / 2e-5;
                prop_assert!(rel_err(gelu_grad(v), n) < 1e-5 || (gelu_grad(v) - n).abs() < 1e-9);
            }

            // layer norm, input and affine parameters
            let gain: Vec<f64> = y.iter().map(|v| v + 2.5).collect();
            let bias = x.clone();
            let xt = Tensor2D::row_vector(&x);
            let (_, cache) = LayerNormCache::forward(&xt, &gain, &bias);
            let (dx, dgain, dbias) = cache.backward(&gain, &Tensor2D::row_vector(&g));
            let f = |v: &[f64]| dot(&layer_norm(v, &gain, &bias), &g);
            let nx = numeric_gradient(f, &x, 1e-5);
            let ng = numeric_gradient(|v| dot(&layer_norm(&x, v, &bias), &g), &gain, 1e-5);
            let nbias = numeric_gradient(|v| dot(&layer_norm(&x, &gain, v), &g), &bias, 1e-5);
            for (a, n) in dx.as_slice().iter().zip(&nx).chain(dgain.iter().zip(&ng)).chain(dbias.iter().zip(&nbias)) {
                prop_assert!(rel_err(*a, *n) < 1e-5 || (a - n).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let x = Tensor2D::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.4 - 1.0);
        let w = Tensor2D::from_fn(4, 2, |r, c| ((r * 3 + c) % 4) as f64 * 0.3 - 0.5);
        let b = vec![0.1, -0.2];
        let dy = Tensor2D::from_fn(3, 2, |r, c| (r as f64) - (c as f64) * 0.5);
        let (dx, params) = linear_backward(&x, &w, &dy, true);
        let (dw, db) = params.unwrap();
        let loss = |x: &Tensor2D<f64>, w: &Tensor2D<f64>, b: &[f64]| {
            dot(linear(x, w, b).as_slice(), dy.as_slice())
        };
        let nx = numeric_gradient(
            |v| loss(&Tensor2D::from_vec(3, 4, v.to_vec()), &w, &b),
            x.as_slice(),
            1e-6,
        );
        let nw = numeric_gradient(
            |v| loss(&x, &Tensor2D::from_vec(4, 2, v.to_vec()), &b),
            w.as_slice(),
            1e-6,
        );
        let nb = numeric_gradient(|v| loss(&x, &w, v), &b, 1e-6);
        for (a, n) in dx.as_slice().iter().zip(&nx) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-8);
        }
        for (a, n) in dw.as_slice().iter().zip(&nw) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-8);
        }
        for (a, n) in db.as_slice().iter().zip(&nb) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-8);
        }
    }
}
