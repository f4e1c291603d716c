use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MIN_NOISE: f64 = 1e-8;
const MAX_JITTER_STEPS: usize = 6;

/// RBF kernel hyper-parameters on the standardized target scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            lengthscale: 1.0,
            signal_var: 1.0,
            noise_var: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GpFitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Skip marginal-likelihood ascent and use the initial parameters.
    pub fixed: bool,
    pub init: KernelParams,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.05,
            fixed: false,
            init: KernelParams::default(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(a: &[f64], b: &[f64], k: &KernelParams) -> f64 {
    k.signal_var * (-0.5 * sq_dist(a, b) / (k.lengthscale * k.lengthscale)).exp()
}

fn gram(x: &[Vec<f64>], k: &KernelParams) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| rbf(&x[i], &x[j], k) + if i == j { k.noise_var } else { 0.0 })
}

/// Cholesky with escalating diagonal jitter.
fn factor(mut k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let mut jitter = 0.0;
    for step in 0..=MAX_JITTER_STEPS {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok(c);
        }
        let next = if step == 0 { 1e-10 } else { jitter * 10.0 };
        for i in 0..n {
            k[(i, i)] += next - jitter;
        }
        jitter = next;
    }
    Err(Error::GpFit(format!("covariance not positive definite after jitter {jitter:e}")))
}

/// Exact GP regression posterior with standardized targets.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    params: KernelParams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    lml: f64,
}

fn lml_and_grad(x: &[Vec<f64>], y: &DVector<f64>, k: &KernelParams) -> Result<(f64, [f64; 3])> {
    let n = x.len();
    let chol = factor(gram(x, k))?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().take(n).map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    // dL/dθ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ) for θ = log ℓ, log σ_f², log σ_n²
    let k_inv = chol.inverse();
    let mut g = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - k_inv[(i, j)];
            let kij = rbf(&x[i], &x[j], k);
            g[0] += w * kij * sq_dist(&x[i], &x[j]) / (k.lengthscale * k.lengthscale);
            g[1] += w * kij;
            if i == j {
                g[2] += w * k.noise_var;
            }
        }
    }
    Ok((lml, g.map(|v| 0.5 * v)))
}

impl GpPosterior {
    /// Fits the posterior, choosing kernel parameters by Adam ascent on the
    /// log marginal likelihood in log space.
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &GpFitConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::GpFit(format!("{} inputs for {} targets", x.len(), y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::GpFit("non-finite target".into()));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(Error::GpFit("inputs of unequal length".into()));
        }
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n;
        let y_scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));

        let mut params = cfg.init;
        params.noise_var = params.noise_var.max(MIN_NOISE);
        if !cfg.fixed && y.len() > 1 {
            params = Self::ascend(x, &ys, params, cfg)?;
        }
        let chol = factor(gram(x, &params))?;
        let alpha = chol.solve(&ys);
        let (lml, _) = lml_and_grad(x, &ys, &params)?;
        Ok(Self {
            x: x.to_vec(),
            y_mean,
            y_scale,
            params,
            chol,
            alpha,
            lml,
        })
    }

    fn ascend(x: &[Vec<f64>], y: &DVector<f64>, init: KernelParams, cfg: &GpFitConfig) -> Result<KernelParams> {
        let bounds = [(-3.0f64, 3.0f64), (-5.0, 3.0), (MIN_NOISE.ln(), 1.0)];
        let mut theta = [
            init.lengthscale.ln(),
            init.signal_var.ln(),
            init.noise_var.ln(),
        ];
        let to_params = |t: &[f64; 3]| KernelParams {
            lengthscale: t[0].exp(),
            signal_var: t[1].exp(),
            noise_var: t[2].exp().max(MIN_NOISE),
        };
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut best = (f64::NEG_INFINITY, init);
        for step in 1..=cfg.steps {
            let p = to_params(&theta);
            let Ok((lml, g)) = lml_and_grad(x, y, &p) else {
                break;
            };
            if lml > best.0 {
                best = (lml, p);
            }
            for i in 0..3 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(step as i32));
                let vh = v[i] / (1.0 - b2.powi(step as i32));
                theta[i] = (theta[i] + cfg.lr * mh / (vh.sqrt() + eps)).clamp(bounds[i].0, bounds[i].1);
            }
        }
        if let Ok((lml, _)) = lml_and_grad(x, y, &to_params(&theta)) {
            if lml > best.0 {
                best = (lml, to_params(&theta));
            }
        }
        if best.0.is_finite() {
            Ok(best.1)
        } else {
            Err(Error::GpFit("marginal likelihood could not be evaluated".into()))
        }
    }

    /// Posterior mean and variance of the latent function, in target units.
    pub fn predict(&self, z: &[f64]) -> (f64, f64) {
        let kx = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| rbf(xi, z, &self.params)));
        let mean = kx.dot(&self.alpha);
        let v = self.chol.solve(&kx);
        let var = (self.params.signal_var - kx.dot(&v)).max(0.0);
        (
            self.y_mean + self.y_scale * mean,
            var * self.y_scale * self.y_scale,
        )
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// Noise variance in target units.
    pub fn noise_var(&self) -> f64 {
        self.params.noise_var * self.y_scale * self.y_scale
    }

    /// Prior variance in target units.
    pub fn signal_var(&self) -> f64 {
        self.params.signal_var * self.y_scale * self.y_scale
    }

    pub fn prior_mean(&self) -> f64 {
        self.y_mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fixed(k: KernelParams) -> GpFitConfig {
        GpFitConfig {
            fixed: true,
            init: k,
            ..Default::default()
        }
    }

    #[test]
    fn single_observation_is_interpolated() {
        let k = KernelParams {
            lengthscale: 1.0,
            signal_var: 1.0,
            noise_var: 1e-8,
        };
        let gp = GpPosterior::fit(&[vec![1.0, 0.0, 1.0]], &[0.37], &fixed(k)).unwrap();
        let (m, v) = gp.predict(&[1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(m, 0.37, epsilon = 1e-6);
        assert!(v <= gp.noise_var() + 1e-6);
    }

    #[test]
    fn far_point_reverts_to_prior() {
        let k = KernelParams {
            lengthscale: 0.2,
            signal_var: 1.0,
            noise_var: 1e-6,
        };
        let x = vec![vec![0.0; 6], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]];
        let gp = GpPosterior::fit(&x, &[1.0, 3.0], &fixed(k)).unwrap();
        let (m, v) = gp.predict(&[1.0; 6]);
        // closed form: k(x*, xi) = exp(-dist²/(2·0.04)), dist² ≥ 5
        let kmax: f64 = (-5.0f64 / 0.08).exp();
        assert!(kmax < 1e-26);
        assert_abs_diff_eq!(m, gp.prior_mean(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, gp.signal_var(), epsilon = 1e-12);
    }

    #[test]
    fn posterior_matches_direct_formula() {
        let k = KernelParams {
            lengthscale: 0.8,
            signal_var: 1.3,
            noise_var: 0.05,
        };
        let x = vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]];
        let y = [0.2, -0.4, 1.1];
        let gp = GpPosterior::fit(&x, &y, &fixed(k)).unwrap();
        // oracle on standardized targets with an explicit inverse
        let mean = y.iter().sum::<f64>() / 3.0;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        let kern = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            1.3 * (-d2 / (2.0 * 0.64)).exp()
        };
        let kmat = DMatrix::from_fn(3, 3, |i, j| kern(&x[i], &x[j]) + if i == j { 0.05 } else { 0.0 });
        let inv = kmat.try_inverse().unwrap();
        let ys = DVector::from_iterator(3, y.iter().map(|v| (v - mean) / sd));
        let star = [0.0, 0.0];
        let ks = DVector::from_iterator(3, x.iter().map(|xi| kern(xi, &star)));
        let m = mean + sd * ks.dot(&(&inv * &ys));
        let v = sd * sd * (1.3 - ks.dot(&(&inv * &ks)));
        let (gm, gv) = gp.predict(&star);
        assert_abs_diff_eq!(gm, m, epsilon = 1e-10);
        assert_abs_diff_eq!(gv, v, epsilon = 1e-10);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let x = vec![vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]];
        let y = DVector::from_vec(vec![0.3, -1.0, 1.2, -0.5]);
        let t = [0.1f64, -0.2, -2.0];
        let p = |t: [f64; 3]| KernelParams {
            lengthscale: t[0].exp(),
            signal_var: t[1].exp(),
            noise_var: t[2].exp(),
        };
        let (_, g) = lml_and_grad(&x, &y, &p(t)).unwrap();
        for i in 0..3 {
            let mut a = t;
            let mut b = t;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let n = (lml_and_grad(&x, &y, &p(a)).unwrap().0 - lml_and_grad(&x, &y, &p(b)).unwrap().0) / 2e-6;
            assert_abs_diff_eq!(g[i], n, epsilon = 1e-6);
        }
    }

    #[test]
    fn fitting_improves_likelihood_and_handles_duplicates() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let y = [1.0, 1.1, 0.2, -0.5, 0.4];
        let start = GpPosterior::fit(&x, &y, &fixed(KernelParams::default())).unwrap();
        let fit = GpPosterior::fit(&x, &y, &GpFitConfig::default()).unwrap();
        assert!(fit.log_marginal_likelihood() >= start.log_marginal_likelihood());
        assert!(fit.params().noise_var >= MIN_NOISE);
        for z in &x {
            assert!(fit.predict(z).1 >= 0.0);
        }
        assert!(GpPosterior::fit(&[], &[], &GpFitConfig::default()).is_err());
    }
}
