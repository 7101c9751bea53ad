//! Incidence from randomized PCR surveillance testing.
//!
//! The proportion `P` of the population that would test positive follows
//! `P' = f - delta P`, and each day `N` random people are tested, so positives
//! are `binom(N, alpha P)`. Log incidence is a penalized cubic spline. The
//! log likelihood gradient comes from the sensitivity equations
//! `S_j' = f X_j - delta S_j`, integrated jointly with `P`.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;
use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::inference::FitState;
use crate::linalg::{cholesky_with_ridge, log_det_chol, pseudo_inverse, psd_rank, symmetrize, trace_product};
use crate::splines::{cubic_basis, SmoothTerm};

pub const PCR_RK4_STEP: f64 = 0.25;
pub const DEFAULT_PCR_K: usize = 15;

#[derive(Debug, Clone)]
pub struct PcrModel {
    /// Clearance rate, one over the mean duration of positivity.
    pub delta_clear: f64,
    /// Test sensitivity.
    pub alpha: f64,
    pub n_daily: u64,
    /// Log incidence basis on days `0..n`.
    pub basis: SmoothTerm,
}

impl PcrModel {
    pub fn new(delta_clear: f64, alpha: f64, n_daily: u64, n_days: usize, k: usize) -> Result<Self> {
        if !(delta_clear > 0.0) || !(alpha > 0.0 && alpha <= 1.0) || n_daily == 0 {
            return Err(Error::Input("need delta > 0, 0 < alpha <= 1 and at least one test per day".into()));
        }
        let grid: Vec<f64> = (0..n_days).map(|d| d as f64).collect();
        Ok(Self { delta_clear, alpha, n_daily, basis: cubic_basis(&grid, k)? })
    }

    /// The surveillance set-up with 400 tests a day, mean positivity of ten
    /// days and perfect sensitivity.
    pub fn reference(n_days: usize) -> Result<Self> {
        Self::new(0.1, 1.0, 400, n_days, DEFAULT_PCR_K)
    }

    pub fn n_days(&self) -> usize {
        self.basis.design.nrows()
    }

    pub fn n_coef(&self) -> usize {
        self.basis.ncol()
    }

    /// Daily incidence `exp(X beta)`.
    pub fn incidence(&self, beta: &DVector<f64>) -> Vec<f64> {
        (&self.basis.design * beta).iter().map(|e| e.exp()).collect()
    }
}

/// `P` at the end of each day for incidence held constant within days,
/// starting from `P(0) = 0`.
pub fn positivity(f: &[f64], delta: f64) -> Vec<f64> {
    let sub = (1.0 / PCR_RK4_STEP).round() as usize;
    let h = 1.0 / sub as f64;
    let mut p = 0.0;
    f.iter()
        .map(|&fi| {
            for _ in 0..sub {
                let k1 = fi - delta * p;
                let k2 = fi - delta * (p + 0.5 * h * k1);
                let k3 = fi - delta * (p + 0.5 * h * k2);
                let k4 = fi - delta * (p + h * k3);
                p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            p
        })
        .collect()
}

/// `P` and its sensitivities `dP/dbeta_j` at the end of each day.
pub fn positivity_with_sensitivities(model: &PcrModel, beta: &DVector<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = model.n_days();
    let q = model.n_coef();
    let f = model.incidence(beta);
    let x = &model.basis.design;
    let delta = model.delta_clear;
    let sub = (1.0 / PCR_RK4_STEP).round() as usize;
    let h = 1.0 / sub as f64;
    let mut state = DVector::<f64>::zeros(q + 1);
    let mut p_out = Vec::with_capacity(n);
    let mut sens = DMatrix::zeros(n, q);
    for day in 0..n {
        // forcing is constant within the day: f for P, f X_j for S_j
        let mut forcing = DVector::zeros(q + 1);
        forcing[0] = f[day];
        for j in 0..q {
            forcing[j + 1] = f[day] * x[(day, j)];
        }
        let rhs = |s: &DVector<f64>| &forcing - s * delta;
        for _ in 0..sub {
            let k1 = rhs(&state);
            let k2 = rhs(&(&state + &k1 * (0.5 * h)));
            let k3 = rhs(&(&state + &k2 * (0.5 * h)));
            let k4 = rhs(&(&state + &k3 * h));
            state += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        p_out.push(state[0]);
        sens.row_mut(day).copy_from(&state.rows(1, q).transpose());
    }
    (p_out, sens)
}

/// Daily positive counts for a daily incidence path.
pub fn simulate_pcr<R: Rng + ?Sized>(f: &[f64], model: &PcrModel, rng: &mut R) -> Result<Vec<u64>> {
    if f.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Input("incidence must be nonnegative".into()));
    }
    let p = positivity(f, model.delta_clear);
    p.iter()
        .map(|&pi| {
            let prob = model.alpha * pi;
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Input(format!("positive probability {prob} outside [0, 1]; incidence too large")));
            }
            Ok(Binomial::new(model.n_daily, prob).map_err(|e| Error::Input(e.to_string()))?.sample(rng))
        })
        .collect()
}

/// A smooth first-wave incidence path peaking a little over 1 per 1000 per
/// day, used for the surveillance experiment.
pub fn reference_incidence(n_days: usize) -> Vec<f64> {
    (0..n_days)
        .map(|t| {
            let t = t as f64;
            2e-4 + 1.0e-3 * (-((t - 35.0) / 14.0).powi(2)).exp() + 3e-4 * (-((t - 80.0) / 12.0).powi(2)).exp()
        })
        .collect()
}

/// Binomial log likelihood, without the constant, and its gradient.
pub fn log_likelihood(model: &PcrModel, counts: &[u64], beta: &DVector<f64>, with_gradient: bool) -> (f64, Option<DVector<f64>>) {
    let n = model.n_daily as f64;
    let a = model.alpha;
    let (p, sens) = if with_gradient {
        let (p, s) = positivity_with_sensitivities(model, beta);
        (p, Some(s))
    } else {
        (positivity(&model.incidence(beta), model.delta_clear), None)
    };
    let mut ll = 0.0;
    let mut dl_dp = vec![0.0; p.len()];
    for (i, (&y, &pi)) in counts.iter().zip(&p).enumerate() {
        let y = y as f64;
        let q = a * pi;
        if !(q > 0.0 && q < 1.0) {
            return (f64::NEG_INFINITY, None);
        }
        ll += y * q.ln() + (n - y) * (1.0 - q).ln();
        dl_dp[i] = y / pi - (n - y) * a / (1.0 - q);
    }
    let grad = sens.map(|s| s.transpose() * DVector::from_vec(dl_dp));
    (ll, grad)
}

struct Penalized<'a> {
    model: &'a PcrModel,
    counts: &'a [u64],
    s: DMatrix<f64>,
}

impl CostFunction for Penalized<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, b: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let beta = DVector::from_column_slice(b);
        let (ll, _) = log_likelihood(self.model, self.counts, &beta, false);
        let pen = 0.5 * (beta.transpose() * &self.s * &beta)[(0, 0)];
        Ok(if ll.is_finite() { pen - ll } else { f64::MAX / 4.0 })
    }
}

impl Gradient for Penalized<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, b: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let beta = DVector::from_column_slice(b);
        let (_, g) = log_likelihood(self.model, self.counts, &beta, true);
        let g = g.unwrap_or_else(|| DVector::zeros(b.len()));
        Ok((&self.s * &beta - g).iter().copied().collect())
    }
}

fn penalized_mode(model: &PcrModel, counts: &[u64], lambda: f64, start: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let q = model.n_coef();
    let problem = Penalized { model, counts, s: &model.basis.penalties[0] * lambda };
    let eye: Vec<Vec<f64>> = (0..q).map(|i| (0..q).map(|j| if i == j { 1e-3 } else { 0.0 }).collect()).collect();
    let solver = BFGS::new(MoreThuenteLineSearch::new()).with_tolerance_grad(1e-8).map_err(|e| Error::Input(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(start.iter().copied().collect()).inv_hessian(eye).max_iters(500))
        .run()
        .map_err(|e| Error::NonConvergence { iterations: 500, trace: e.to_string() })?;
    let state = res.state();
    let b = state.get_best_param().cloned().ok_or_else(|| Error::Domain("quasi-Newton produced no iterate".into()))?;
    Ok((DVector::from_vec(b), -state.get_best_cost()))
}

/// Negative Hessian of the log likelihood by central differences of the
/// analytic gradient.
pub fn fd_hessian(model: &PcrModel, counts: &[u64], beta: &DVector<f64>) -> DMatrix<f64> {
    let q = beta.len();
    let mut h = DMatrix::zeros(q, q);
    for j in 0..q {
        let eps = 1e-5 * beta[j].abs().max(1.0);
        let mut up = beta.clone();
        up[j] += eps;
        let mut dn = beta.clone();
        dn[j] -= eps;
        let gu = log_likelihood(model, counts, &up, true).1.unwrap_or_else(|| DVector::zeros(q));
        let gd = log_likelihood(model, counts, &dn, true).1.unwrap_or_else(|| DVector::zeros(q));
        h.set_column(j, &(-(gu - gd) / (2.0 * eps)));
    }
    symmetrize(&mut h);
    h
}

/// Reconstructed incidence with pointwise two standard error bands.
#[derive(Debug, Clone)]
pub struct PcrFit {
    pub state: FitState,
    pub incidence: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Standard error of log incidence by day.
    pub log_se: Vec<f64>,
}

struct Laplace {
    beta: DVector<f64>,
    neg_hess: DMatrix<f64>,
    lml: f64,
}

fn laplace(model: &PcrModel, counts: &[u64], lambda: f64, start: &DVector<f64>, rank: usize) -> Result<Laplace> {
    let (beta, _) = penalized_mode(model, counts, lambda, start)?;
    let (ll, _) = log_likelihood(model, counts, &beta, false);
    if !ll.is_finite() {
        return Err(Error::Domain("log likelihood not finite at the mode".into()));
    }
    let s = &model.basis.penalties[0] * lambda;
    let neg_hess = fd_hessian(model, counts, &beta);
    let mut prec = &neg_hess + &s;
    symmetrize(&mut prec);
    let (chol, _) = cholesky_with_ridge(&prec);
    let log_det_s = pseudo_inverse(&s, rank).log_det;
    let lml = ll - 0.5 * (beta.transpose() * &s * &beta)[(0, 0)] + 0.5 * log_det_s - 0.5 * log_det_chol(&chol);
    Ok(Laplace { beta, neg_hess, lml })
}

/// Penalized quasi-Newton fit with the smoothing parameter chosen by
/// Fellner-Schall updates on the Laplace approximate marginal likelihood.
pub fn fit_pcr_incidence(counts: &[u64], model: &PcrModel) -> Result<PcrFit> {
    let n = model.n_days();
    if counts.len() != n {
        return Err(Error::Dimension(format!("{} counts for a {n} day model", counts.len())));
    }
    let nt = model.n_daily as f64;
    if counts.iter().any(|&y| y as f64 > nt) {
        return Err(Error::Input("more positives than tests".into()));
    }
    if counts.iter().all(|&y| y == 0) {
        warn!("all PCR counts are zero; incidence is at the boundary and bands will be wide");
    }
    // start from the equilibrium incidence of the mean positive fraction
    let mean_frac = (counts.iter().sum::<u64>() as f64 + 0.5) / (n as f64 * nt) / model.alpha;
    let level = (mean_frac * model.delta_clear).ln();
    let x = &model.basis.design;
    let xtx = x.transpose() * x + DMatrix::identity(model.n_coef(), model.n_coef()) * 1e-8;
    let beta = xtx.lu().solve(&(x.transpose() * DVector::from_element(n, level))).ok_or_else(|| Error::LinAlg("singular start".into()))?;

    let s1 = &model.basis.penalties[0];
    let rank = psd_rank(s1, 1e-9);
    let h0 = fd_hessian(model, counts, &beta);
    let mut lambda = (0.1 * h0.diagonal().abs().mean() / s1.diagonal().abs().mean().max(1e-300)).clamp(1e-6, 1e8);
    let mut cur = laplace(model, counts, lambda, &beta, rank)?;
    let mut trace = vec![cur.lml];
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let s = s1 * lambda;
        let mut prec = &cur.neg_hess + &s;
        symmetrize(&mut prec);
        let (chol, _) = cholesky_with_ridge(&prec);
        let v = chol.inverse();
        let s_pinv = pseudo_inverse(&s, rank).inverse;
        let numer = trace_product(&s_pinv, s1) - trace_product(&v, s1);
        let denom = (cur.beta.transpose() * s1 * &cur.beta)[(0, 0)];
        if !(numer > 0.0 && denom > 0.0) {
            break;
        }
        let mut step = (numer / denom).ln().clamp(-5.0, 5.0);
        let mut accepted = false;
        for _ in 0..12 {
            let trial = lambda * step.exp();
            if let Ok(next) = laplace(model, counts, trial, &cur.beta, rank) {
                if next.lml >= cur.lml - 1e-10 * cur.lml.abs() {
                    lambda = trial;
                    let gain = next.lml - cur.lml;
                    cur = next;
                    trace.push(cur.lml);
                    accepted = gain.abs() > 1e-9 * cur.lml.abs() && step.abs() > 1e-4;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let s = s1 * lambda;
    let mut prec = &cur.neg_hess + &s;
    symmetrize(&mut prec);
    let (chol, _) = cholesky_with_ridge(&prec);
    let v = chol.inverse();
    let edf = trace_product(&v, &cur.neg_hess);
    let eta = x * &cur.beta;
    let log_se: Vec<f64> = (0..n)
        .map(|t| {
            let row = x.row(t);
            (row * &v * row.transpose())[(0, 0)].max(0.0).sqrt()
        })
        .collect();
    let incidence: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let lower = eta.iter().zip(&log_se).map(|(e, s)| (e - 2.0 * s).exp()).collect();
    let upper = eta.iter().zip(&log_se).map(|(e, s)| (e + 2.0 * s).exp()).collect();
    let deviance = binomial_deviance(counts, &positivity(&incidence, model.delta_clear), model);
    let state = FitState {
        beta: cur.beta,
        hessian: cur.neg_hess,
        s_lambda: s,
        lambda: vec![lambda],
        theta: f64::INFINITY,
        lml: cur.lml,
        deviance,
        edf,
        outer_iterations: iterations,
        lml_trace: trace,
    };
    Ok(PcrFit { state, incidence, lower, upper, log_se })
}

fn binomial_deviance(counts: &[u64], p: &[f64], model: &PcrModel) -> f64 {
    let n = model.n_daily as f64;
    let xlogy = |x: f64, y: f64| if x > 0.0 { x * (x / y).ln() } else { 0.0 };
    counts
        .iter()
        .zip(p)
        .map(|(&y, &pi)| {
            let y = y as f64;
            let m = n * model.alpha * pi;
            2.0 * (xlogy(y, m) + xlogy(n - y, n - m))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_incidence_gives_no_positives() {
        let m = PcrModel::reference(50).unwrap();
        let y = simulate_pcr(&vec![0.0; 50], &m, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(y.iter().all(|&v| v == 0));
    }

    #[test]
    fn constant_incidence_reaches_equilibrium() {
        let m = PcrModel::reference(200).unwrap();
        let f = vec![1e-3; 200];
        let p = positivity(&f, m.delta_clear);
        assert!((p[199] - 1e-3 / 0.1).abs() < 1e-9);
        let y = simulate_pcr(&f, &m, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let tail: Vec<f64> = y[100..].iter().map(|&v| v as f64).collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let expect = 400.0 * 0.01;
        let se = (400.0 * 0.01 * 0.99 / tail.len() as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn too_large_incidence_is_rejected() {
        let m = PcrModel::reference(100).unwrap();
        assert!(simulate_pcr(&vec![0.5; 100], &m, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn rk4_matches_the_exact_daily_solution() {
        let f: Vec<f64> = (0..30).map(|t| 1e-3 * (1.0 + (t as f64 / 5.0).sin())).collect();
        let p = positivity(&f, 0.1);
        let mut exact = 0.0;
        for (i, &fi) in f.iter().enumerate() {
            exact = fi / 0.1 + (exact - fi / 0.1) * (-0.1f64).exp();
            assert!((p[i] - exact).abs() < 1e-8 * exact);
        }
    }

    #[test]
    fn sensitivities_match_perturbed_states() {
        let m = PcrModel::new(0.1, 1.0, 400, 40, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let beta = DVector::from_fn(8, |_, _| -7.0 + rng.random::<f64>());
        let (p0, sens) = positivity_with_sensitivities(&m, &beta);
        for j in 0..8 {
            let mut b = beta.clone();
            b[j] += 1e-6;
            let p1 = positivity(&m.incidence(&b), 0.1);
            let mut b2 = beta.clone();
            b2[j] -= 1e-6;
            let p2 = positivity(&m.incidence(&b2), 0.1);
            for t in 0..40 {
                let fd = (p1[t] - p2[t]) / 2e-6;
                let scale = sens.column(j).amax();
                assert!((fd - sens[(t, j)]).abs() < 1e-5 * scale, "j {j} t {t}: {fd} vs {}", sens[(t, j)]);
            }
            assert!((p0[5] - positivity(&m.incidence(&beta), 0.1)[5]).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = PcrModel::new(0.1, 1.0, 400, 60, 10).unwrap();
        let f = reference_incidence(60);
        let y = simulate_pcr(&f, &m, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let beta = DVector::from_fn(10, |i, _| -7.0 + 0.1 * (i as f64).sin());
        let (_, g) = log_likelihood(&m, &y, &beta, true);
        let g = g.unwrap();
        for j in 0..10 {
            let h = 1e-5;
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let fd = (log_likelihood(&m, &y, &up, false).0 - log_likelihood(&m, &y, &dn, false).0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5 * g[j].abs().max(1.0), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn positivity_lags_a_pulse() {
        let mut f = vec![0.0; 80];
        f[10] = 1e-3;
        let p = positivity(&f, 0.1);
        // P rises during the pulse then decays at rate delta
        assert_eq!(crate::inference::argmax_first(&p), 10);
        let mean_lag: f64 = p.iter().enumerate().map(|(t, v)| (t as f64 + 1.0 - 10.5) * v).sum::<f64>() / p.iter().sum::<f64>();
        assert!((mean_lag - 10.0).abs() < 1.0, "{mean_lag}");
    }

    #[test]
    fn sensitivity_only_scales_the_fit() {
        let f = reference_incidence(100);
        let m1 = PcrModel::reference(100).unwrap();
        let m2 = PcrModel::new(0.1, 0.5, 400, 100, DEFAULT_PCR_K).unwrap();
        let y = simulate_pcr(&f, &m1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let a = fit_pcr_incidence(&y, &m1).unwrap();
        let b = fit_pcr_incidence(&y, &m2).unwrap();
        for t in 0..100 {
            assert!((0.5 * b.incidence[t] - a.incidence[t]).abs() < 2e-3 * a.incidence[t], "{t}");
        }
    }

    #[test]
    fn reference_experiment_recovers_incidence() {
        let f = reference_incidence(100);
        let m = PcrModel::reference(100).unwrap();
        let y = simulate_pcr(&f, &m, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let fit = fit_pcr_incidence(&y, &m).unwrap();
        let inside = (0..90).filter(|&t| f[t] >= fit.lower[t] && f[t] <= fit.upper[t]).count();
        assert!(inside >= 81, "{inside} of 90");
        assert!(fit.log_se[99] >= fit.log_se[50]);
    }
}
