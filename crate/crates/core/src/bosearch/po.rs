//! Probabilistic objective `PO(θ) = Σ_z p(z|θ)·α(z)` over independent
//! Bernoulli bits, and its gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::ops::sigmoid;

pub const MAX_EXACT_BITS: usize = 20;
const LOGIT_LIMIT: f64 = 30.0;

/// Bernoulli parameters stored as unconstrained logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    logits: Vec<f64>,
}

impl ThetaVector {
    pub fn uniform(n: usize) -> Self {
        Self { logits: vec![0.0; n] }
    }

    pub fn from_logits(logits: Vec<f64>) -> Self {
        Self {
            logits: logits.into_iter().map(|l| l.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)).collect(),
        }
    }

    /// Panics unless every probability is strictly inside (0, 1).
    pub fn from_probs(probs: &[f64]) -> Self {
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0), "θ must lie in (0,1)");
        Self::from_logits(probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        self.probs().iter().map(|&p| rng.random::<f64>() < p).collect()
    }
}

/// Bit `i` of `code` is `z_i`.
pub fn bits_of(code: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| (code >> i) & 1 == 1).collect()
}

pub fn code_of(bits: &[bool]) -> usize {
    bits.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum()
}

/// Acquisition values for every `z`, indexed by [`code_of`].
#[derive(Clone, Debug)]
pub struct AlphaTable {
    pub n_bits: usize,
    pub values: Vec<f64>,
}

impl AlphaTable {
    pub fn build(n_bits: usize, alpha: impl Fn(&[bool]) -> f64) -> Self {
        assert!(n_bits <= MAX_EXACT_BITS, "exact enumeration needs at most {MAX_EXACT_BITS} bits");
        let values = (0..1usize << n_bits).map(|c| alpha(&bits_of(c, n_bits))).collect();
        Self { n_bits, values }
    }

    pub fn get(&self, z: &[bool]) -> f64 {
        self.values[code_of(z)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoEstimate {
    pub value: f64,
    /// `∂PO/∂θ_i`.
    pub grad: Vec<f64>,
    /// Standard errors for Monte Carlo estimates; zero when exact.
    pub value_se: f64,
    pub grad_se: Vec<f64>,
}

/// Literal sums over all `2^n` designs.
pub fn po_exact(theta: &[f64], table: &AlphaTable) -> PoEstimate {
    let n = theta.len();
    assert_eq!(n, table.n_bits);
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for (code, &a) in table.values.iter().enumerate() {
        // p(z) and, per bit, p(z_{-i}) times the sign of ∂p/∂θ_i
        let mut p = 1.0;
        for (i, &t) in theta.iter().enumerate() {
            p *= if (code >> i) & 1 == 1 { t } else { 1.0 - t };
        }
        value += p * a;
        for (i, &t) in theta.iter().enumerate() {
            let on = (code >> i) & 1 == 1;
            let factor = if on { t } else { 1.0 - t };
            let rest = if factor > 0.0 {
                p / factor
            } else {
                theta
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, &tj)| if (code >> j) & 1 == 1 { tj } else { 1.0 - tj })
                    .product()
            };
            grad[i] += if on { rest * a } else { -rest * a };
        }
    }
    PoEstimate {
        value,
        grad,
        value_se: 0.0,
        grad_se: vec![0.0; n],
    }
}

/// Score-function estimate `mean(α(z)·∇θ log p(z|θ))` over `samples` draws.
pub fn po_monte_carlo<R: Rng + ?Sized>(
    theta: &[f64],
    alpha: impl Fn(&[bool]) -> f64,
    samples: usize,
    rng: &mut R,
) -> PoEstimate {
    let n = theta.len();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut g = vec![0.0; n];
    let mut g_sq = vec![0.0; n];
    let mut z = vec![false; n];
    for _ in 0..samples {
        for (zi, &t) in z.iter_mut().zip(theta) {
            *zi = rng.random::<f64>() < t;
        }
        let a = alpha(&z);
        sum += a;
        sum_sq += a * a;
        for i in 0..n {
            let score = if z[i] { 1.0 / theta[i] } else { -1.0 / (1.0 - theta[i]) };
            let x = a * score;
            g[i] += x;
            g_sq[i] += x * x;
        }
    }
    let s = samples as f64;
    let se = |sum: f64, sq: f64| {
        if samples < 2 {
            return f64::INFINITY;
        }
        let mean = sum / s;
        let var = ((sq / s - mean * mean) * s / (s - 1.0)).max(0.0);
        (var / s).sqrt()
    };
    PoEstimate {
        value: sum / s,
        grad: g.iter().map(|x| x / s).collect(),
        value_se: se(sum, sum_sq),
        grad_se: g.iter().zip(&g_sq).map(|(&a, &b)| se(a, b)).collect(),
    }
}

/// Either an enumerated α table or a Monte Carlo budget.
pub enum PoMode<'a> {
    Exact(&'a AlphaTable),
    MonteCarlo {
        alpha: &'a dyn Fn(&[bool]) -> f64,
        samples: usize,
    },
}

pub fn po_and_gradient<R: Rng + ?Sized>(theta: &ThetaVector, mode: &PoMode<'_>, rng: &mut R) -> PoEstimate {
    let probs = theta.probs();
    match mode {
        PoMode::Exact(table) => po_exact(&probs, table),
        PoMode::MonteCarlo { alpha, samples } => po_monte_carlo(&probs, alpha, *samples, rng),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ThetaOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    pub mc_samples: usize,
}

impl Default for ThetaOptConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.1,
            restarts: 3,
            mc_samples: 512,
        }
    }
}

/// Adam ascent on PO in logit space from `theta0`; returns the best iterate.
pub fn optimize_theta<R: Rng + ?Sized>(
    theta0: &ThetaVector,
    mode: &PoMode<'_>,
    cfg: &ThetaOptConfig,
    rng: &mut R,
) -> (ThetaVector, f64) {
    let n = theta0.len();
    let mut logits = theta0.logits().to_vec();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut best: Option<(ThetaVector, f64)> = None;
    for step in 1..=cfg.steps + 1 {
        let theta = ThetaVector::from_logits(logits.clone());
        let est = po_and_gradient(&theta, mode, rng);
        if best.as_ref().is_none_or(|(_, b)| est.value > *b) {
            best = Some((theta.clone(), est.value));
        }
        if step > cfg.steps {
            break;
        }
        let probs = theta.probs();
        for i in 0..n {
            // chain rule through θ = σ(logit)
            let g = est.grad[i] * probs[i] * (1.0 - probs[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(step as i32));
            let vh = v[i] / (1.0 - b2.powi(step as i32));
            logits[i] = (logits[i] + cfg.lr * mh / (vh.sqrt() + eps)).clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
        }
    }
    best.expect("at least one evaluation")
}
