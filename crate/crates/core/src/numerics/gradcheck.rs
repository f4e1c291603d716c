//! Central-difference verification of reverse-mode gradients.

use super::{Grads, ParamStore, Real};
use crate::{Error, Result};

/// A scalar loss over a parameter store with an analytic gradient.
pub trait Differentiable<T: Real> {
    fn loss(&self, store: &ParamStore<T>) -> T;
    fn loss_and_grads(&self, store: &ParamStore<T>) -> (T, Grads<T>);
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig<T> {
    pub step: T,
    pub tolerance: T,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero analytically are compared in absolute terms.
    pub denominator_floor: T,
}

impl<T: Real> Default for GradCheckConfig<T> {
    fn default() -> Self {
        Self {
            step: T::lit(1e-4),
            tolerance: T::lit(1e-3),
            denominator_floor: T::lit(1e-7),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    /// Parameter name and flat index of the worst scalar.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Every frozen parameter's analytic slot is exactly zero.
    pub frozen_slots_zero: bool,
}

impl<T: Real> GradCheckReport<T> {
    pub fn passed(&self, tolerance: T) -> bool {
        self.frozen_slots_zero && self.max_rel_error < tolerance
    }
}

pub fn relative_error<T: Real>(analytic: T, numeric: T, floor: T) -> T {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of every trainable scalar against central
/// differences. The store is restored before returning.
pub fn check_gradients<T: Real, F: Differentiable<T>>(
    objective: &F,
    store: &mut ParamStore<T>,
    config: GradCheckConfig<T>,
) -> Result<GradCheckReport<T>> {
    let (base, grads) = objective.loss_and_grads(store);
    let again = objective.loss(store);
    if base != again {
        return Err(Error::NonDeterministic(format!(
            "loss evaluated to {base} then {again}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: None,
        checked: 0,
        frozen_slots_zero: true,
    };
    let two_h = config.step + config.step;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.is_frozen(id) {
            if grads.get(id).as_slice().iter().any(|&g| g != T::zero()) {
                report.frozen_slots_zero = false;
            }
            continue;
        }
        for k in 0..store.get(id).len() {
            let orig = store.get(id).as_slice()[k];
            store.get_mut(id).as_mut_slice()[k] = orig + config.step;
            let plus = objective.loss(store);
            store.get_mut(id).as_mut_slice()[k] = orig - config.step;
            let minus = objective.loss(store);
            store.get_mut(id).as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / two_h;
            let analytic = grads.get(id).as_slice()[k];
            let err = relative_error(analytic, numeric, config.denominator_floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.param(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn numeric_gradient<T: Real>(f: impl Fn(&[T]) -> T, x: &[T], h: T) -> Vec<T> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        out.push((plus - minus) / (h + h));
    }
    out
}
