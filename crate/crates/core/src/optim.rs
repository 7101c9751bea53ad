//! Derivative-free minimisers used for small auxiliary fits.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;

use crate::error::{Error, Result};

struct Objective<F>(F);

impl<F> CostFunction for Objective<F>
where
    F: Fn(&[f64]) -> f64,
{
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let v = (self.0)(p);
        Ok(if v.is_finite() { v } else { f64::MAX / 4.0 })
    }
}

/// Minimise `f` by Nelder-Mead from `x0` with initial simplex edge `step`.
/// Restarts once from the optimum to guard against simplex collapse.
pub(crate) fn nelder_mead<F>(f: F, x0: &[f64], step: f64, max_iter: u64) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    let mut start = x0.to_vec();
    let mut best = (start.clone(), f64::INFINITY);
    for _ in 0..2 {
        let mut simplex = vec![start.clone()];
        for i in 0..start.len() {
            let mut v = start.clone();
            v[i] += step;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-12)
            .map_err(|e| Error::Input(e.to_string()))?;
        let res = Executor::new(Objective(&f), solver)
            .configure(|s| s.max_iters(max_iter))
            .run()
            .map_err(|e| Error::Input(e.to_string()))?;
        let state = res.state();
        let x = state.get_best_param().cloned().unwrap_or_else(|| start.clone());
        let fx = state.get_best_cost();
        if fx < best.1 {
            best = (x.clone(), fx);
        }
        start = x;
    }
    Ok(best)
}

/// Golden-section maximisation of a unimodal function on `[lo, hi]`.
pub(crate) fn golden_max<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Bisection root of a continuous function with a sign change on `[lo, hi]`.
pub(crate) fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    let mut flo = f(lo);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
