//! Bayesian optimization over architecture genomes: GP surrogate, expected
//! improvement, and Bernoulli-relaxed acquisition ascent.

mod gp;
mod po;

pub use gp::{GpFitConfig, GpPosterior, KernelParams, MIN_NOISE};
pub use po::{
    bits_of, code_of, optimize_theta, po_and_gradient, po_exact, po_monte_carlo, AlphaTable, PoEstimate, PoMode,
    ThetaOptConfig, ThetaVector, MAX_EXACT_BITS,
};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::model::ArchitectureGenome;
use crate::{Error, Result};

/// `E[max(f − f_best, 0)]` for `f ~ N(mean, var)`.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let gap = mean - best;
    let sd = var.max(0.0).sqrt();
    if sd < 1e-12 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    let n = Normal::standard();
    (gap * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub z: ArchitectureGenome,
    pub f: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoConfig {
    pub n_bits: usize,
    pub n_init: usize,
    pub n_iterations: usize,
    pub seed: u64,
    pub gp: GpFitConfig,
    pub theta: ThetaOptConfig,
    /// Resamples drawn when `z ~ p(Z|θ)` repeats an evaluated genome.
    pub resample_attempts: usize,
}

impl BoConfig {
    pub fn new(n_bits: usize, n_init: usize, n_iterations: usize, seed: u64) -> Self {
        Self {
            n_bits,
            n_init,
            n_iterations,
            seed,
            gp: GpFitConfig::default(),
            theta: ThetaOptConfig::default(),
            resample_attempts: 32,
        }
    }
}

/// One line of `search_trace.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub phase: String,
    pub z: String,
    pub f: f64,
    pub failed: bool,
    pub theta: Option<Vec<f64>>,
    pub best_so_far: f64,
}

#[derive(Clone, Debug)]
pub struct BoResult {
    pub best: ArchitectureGenome,
    pub best_f: f64,
    pub observations: Vec<Observation>,
    pub trace: Vec<TraceEntry>,
}

fn genome_bits(bits: Vec<bool>) -> ArchitectureGenome {
    ArchitectureGenome::new(bits).expect("genome length is a multiple of 3")
}

/// Maximizes `objective` over `{0,1}^n_bits`. Evaluations that fail are
/// recorded with the worst value observed so far.
pub fn bo_search(
    cfg: &BoConfig,
    mut objective: impl FnMut(&ArchitectureGenome) -> Result<f64>,
    mut on_entry: impl FnMut(&TraceEntry),
) -> Result<BoResult> {
    if cfg.n_bits == 0 || !cfg.n_bits.is_multiple_of(3) {
        return Err(Error::Invalid(format!("genome needs a positive multiple of 3 bits, got {}", cfg.n_bits)));
    }
    if cfg.n_init == 0 {
        return Err(Error::Invalid("at least one initial design is required".into()));
    }
    let n = cfg.n_bits;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut observations: Vec<Observation> = Vec::new();
    let mut trace = Vec::new();
    let mut seen: HashMap<Vec<bool>, f64> = HashMap::new();
    let mut best: Option<(ArchitectureGenome, f64)> = None;
    let mut pending_failures: Vec<ArchitectureGenome> = Vec::new();

    let mut record = |z: Vec<bool>,
                      iter: usize,
                      phase: &str,
                      theta: Option<Vec<f64>>,
                      observations: &mut Vec<Observation>,
                      seen: &mut HashMap<Vec<bool>, f64>,
                      best: &mut Option<(ArchitectureGenome, f64)>,
                      pending: &mut Vec<ArchitectureGenome>| {
        let genome = genome_bits(z.clone());
        let outcome = objective(&genome).and_then(|f| {
            if f.is_finite() {
                Ok(f)
            } else {
                Err(Error::Invalid(format!("objective returned {f}")))
            }
        });
        let (f, failed) = match outcome {
            Ok(f) => (Some(f), false),
            Err(e) => {
                log::warn!("objective failed on genome {}: {e}", genome.to_string_bits());
                let worst = observations.iter().map(|o| o.f).fold(f64::INFINITY, f64::min);
                (worst.is_finite().then_some(worst), true)
            }
        };
        if let Some(f) = f {
            if !failed && best.as_ref().is_none_or(|(_, b)| f > *b) {
                *best = Some((genome.clone(), f));
            }
            observations.push(Observation { z: genome.clone(), f });
            seen.insert(z, f);
            // failures before the first success take the current worst
            if !failed {
                let worst = observations.iter().map(|o| o.f).fold(f64::INFINITY, f64::min);
                for g in pending.drain(..) {
                    observations.push(Observation { z: g, f: worst });
                }
            }
        } else {
            pending.push(genome.clone());
            seen.insert(z, f64::NEG_INFINITY);
        }
        let entry = TraceEntry {
            iter,
            phase: phase.into(),
            z: genome.to_string_bits(),
            f: f.unwrap_or(f64::NAN),
            failed,
            theta,
            best_so_far: best.as_ref().map_or(f64::NAN, |(_, b)| *b),
        };
        on_entry(&entry);
        entry
    };

    // initial designs: uniform, distinct while the space allows
    let space = if n < 63 { 1u64 << n } else { u64::MAX };
    for i in 0..cfg.n_init {
        let mut z: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let mut tries = 0;
        while seen.contains_key(&z) && (seen.len() as u64) < space && tries < 1000 {
            z = (0..n).map(|_| rng.random()).collect();
            tries += 1;
        }
        let e = record(z, i, "init", None, &mut observations, &mut seen, &mut best, &mut pending_failures);
        trace.push(e);
    }

    for it in 0..cfg.n_iterations {
        let iter = cfg.n_init + it;
        let (z, theta) = if observations.is_empty() {
            ((0..n).map(|_| rng.random()).collect(), None)
        } else {
            let x: Vec<Vec<f64>> = observations.iter().map(|o| o.z.as_f64()).collect();
            let y: Vec<f64> = observations.iter().map(|o| o.f).collect();
            let gp = GpPosterior::fit(&x, &y, &cfg.gp)?;
            let f_best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let alpha = |z: &[bool]| {
                let zf: Vec<f64> = z.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let (m, v) = gp.predict(&zf);
                expected_improvement(m, v, f_best)
            };
            let table = (n <= MAX_EXACT_BITS).then(|| AlphaTable::build(n, alpha));
            let mode = match &table {
                Some(t) => PoMode::Exact(t),
                None => PoMode::MonteCarlo {
                    alpha: &alpha,
                    samples: cfg.theta.mc_samples,
                },
            };
            let mut best_theta: Option<(ThetaVector, f64)> = None;
            for r in 0..cfg.theta.restarts.max(1) {
                let start = if r == 0 {
                    ThetaVector::uniform(n)
                } else {
                    ThetaVector::from_logits((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                };
                let (t, v) = optimize_theta(&start, &mode, &cfg.theta, &mut rng);
                if best_theta.as_ref().is_none_or(|(_, b)| v > *b) {
                    best_theta = Some((t, v));
                }
            }
            let (theta, _) = best_theta.expect("one restart");
            let mut z = theta.sample(&mut rng);
            let mut attempts = 0;
            while seen.contains_key(&z) && attempts < cfg.resample_attempts {
                z = theta.sample(&mut rng);
                attempts += 1;
            }
            if seen.contains_key(&z) {
                if let Some(t) = &table {
                    // most useful unevaluated design; first-encountered wins ties
                    let mut pick: Option<(usize, f64)> = None;
                    for (code, &a) in t.values.iter().enumerate() {
                        if !seen.contains_key(&bits_of(code, n)) && pick.is_none_or(|(_, b)| a > b) {
                            pick = Some((code, a));
                        }
                    }
                    if let Some((code, _)) = pick {
                        z = bits_of(code, n);
                    }
                }
            }
            (z, Some(theta.probs()))
        };
        let e = record(z, iter, "bo", theta, &mut observations, &mut seen, &mut best, &mut pending_failures);
        trace.push(e);
    }

    let (best, best_f) = best.ok_or_else(|| Error::Invalid("every objective evaluation failed".into()))?;
    Ok(BoResult {
        best,
        best_f,
        observations,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ei_closed_forms() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0), 0.0);
        assert_abs_diff_eq!(expected_improvement(1.7, 0.0, 1.0), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(
            expected_improvement(0.3, 1.0, 0.3),
            1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            epsilon = 1e-12
        );
        for (m, v) in [(-5.0, 0.01), (0.0, 4.0), (3.0, 1e-30)] {
            assert!(expected_improvement(m, v, 0.0) >= 0.0);
        }
    }

    #[test]
    fn zero_iterations_returns_best_initial_design() {
        let cfg = BoConfig::new(6, 4, 0, 1);
        let mut seen = Vec::new();
        let r = bo_search(&cfg, |g| Ok(g.to_index() as f64), |e| seen.push(e.f)).unwrap();
        assert_eq!(seen.len(), 4);
        assert_eq!(r.best_f, seen.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        assert_eq!(r.best.to_index() as f64, r.best_f);
    }

    #[test]
    fn failures_take_the_worst_value_and_search_continues() {
        let cfg = BoConfig::new(3, 3, 4, 7);
        let r = bo_search(
            &cfg,
            |g| {
                if g.bits()[0] {
                    Err(Error::Invalid("boom".into()))
                } else {
                    Ok(1.0 + g.to_index() as f64)
                }
            },
            |_| {},
        )
        .unwrap();
        assert_eq!(r.trace.len(), 7);
        let worst_ok = r.trace.iter().filter(|e| !e.failed).map(|e| e.f).fold(f64::INFINITY, f64::min);
        for o in &r.observations {
            assert!(o.f >= worst_ok);
        }
        assert!(!r.best.bits()[0]);
    }

    #[test]
    fn best_so_far_is_monotone() {
        let cfg = BoConfig::new(6, 3, 8, 2);
        let r = bo_search(&cfg, |g| Ok(-(g.to_index() as f64 - 37.0).abs()), |_| {}).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].best_so_far >= w[0].best_so_far);
        }
    }
}
