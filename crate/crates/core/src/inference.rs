//! Empirical Bayes fitting and posterior simulation.
//!
//! Coefficients are found by penalized Newton iteration; smoothing parameters
//! by generalized Fellner-Schall updates that are only accepted if the
//! Laplace approximate marginal likelihood does not decrease. Posterior
//! samples come either from the Gaussian approximation at the mode or from a
//! Metropolis-Hastings chain that alternates independence proposals with
//! shrunken random-walk steps, both built from that approximation and then
//! refined on pilot runs.

use std::cell::RefCell;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::durations::{DurationDist, DurationEnsemble};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_ridge, log_det_chol, pseudo_inverse, symmetrize, trace_product};
use crate::models::Model;
use crate::optim::golden_max;

#[derive(Debug, Clone)]
pub struct FitSettings {
    pub max_newton: usize,
    pub max_outer: usize,
    /// Relative infinity-norm tolerance on the penalized gradient.
    pub grad_tol: f64,
    /// Tolerance on the largest log smoothing parameter step.
    pub lambda_tol: f64,
    /// Largest log smoothing parameter change per update.
    pub max_log_step: f64,
    /// Starting smoothing parameters; chosen from the Hessian scale if absent.
    pub initial_lambda: Option<Vec<f64>>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            max_newton: 200,
            max_outer: 200,
            grad_tol: 1e-6,
            lambda_tol: 1e-4,
            max_log_step: 5.0,
            initial_lambda: None,
        }
    }
}

/// A fitted model at fixed smoothing parameters and dispersion.
#[derive(Debug, Clone)]
pub struct FitState {
    pub beta: DVector<f64>,
    /// Negative Hessian of the log likelihood at `beta`.
    pub hessian: DMatrix<f64>,
    pub s_lambda: DMatrix<f64>,
    pub lambda: Vec<f64>,
    pub theta: f64,
    /// Laplace approximate log marginal likelihood.
    pub lml: f64,
    pub deviance: f64,
    /// Effective degrees of freedom `tr((H + S)^-1 H)`.
    pub edf: f64,
    pub outer_iterations: usize,
    /// Marginal likelihood after each accepted smoothing update.
    pub lml_trace: Vec<f64>,
}

impl FitState {
    /// Posterior precision `H + S_lambda`.
    pub fn precision(&self) -> DMatrix<f64> {
        let mut p = &self.hessian + &self.s_lambda;
        symmetrize(&mut p);
        p
    }
}

struct ModeFit {
    beta: DVector<f64>,
    value: f64,
    neg_hess: DMatrix<f64>,
}

const MAX_NEWTON_STEP: f64 = 2.0;

/// Penalized Newton iteration for the mode at fixed smoothing parameters.
fn find_mode(model: &Model, lambda: &[f64], beta0: &DVector<f64>, settings: &FitSettings) -> Result<ModeFit> {
    let s = model.total_penalty(lambda);
    let mut beta = beta0.clone();
    let mut obj = model.penalized_objective(&beta, lambda)?;
    if !obj.value.is_finite() {
        return Err(Error::Domain("penalized likelihood is not finite at the starting values".into()));
    }
    let mut trace = Vec::new();
    for it in 0..settings.max_newton {
        let tol = settings.grad_tol * obj.value.abs().max(1.0);
        if obj.gradient.amax() < tol {
            return Ok(ModeFit { beta, value: obj.value, neg_hess: s_free_hessian(&obj.hessian, &s) });
        }
        let mut a = -&obj.hessian;
        symmetrize(&mut a);
        let (chol, _) = cholesky_with_ridge(&a);
        let mut step = chol.solve(&obj.gradient);
        // coefficients act on log scales; long jumps can reach absorbing
        // regions such as a renewal epidemic exhausting its population
        let longest = step.amax();
        if longest > MAX_NEWTON_STEP {
            step *= MAX_NEWTON_STEP / longest;
        }
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial = &beta + &step * alpha;
            let value = model.penalized_log_likelihood(&trial, lambda);
            if value.is_finite() && value >= obj.value - 1e-12 * obj.value.abs() {
                beta = trial;
                obj = model.penalized_objective(&beta, lambda)?;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        trace.push(obj.value);
        if !improved {
            // no ascent possible at machine precision: accept if nearly stationary
            if obj.gradient.amax() < 1e3 * tol {
                return Ok(ModeFit { beta, value: obj.value, neg_hess: s_free_hessian(&obj.hessian, &s) });
            }
            return Err(Error::NonConvergence { iterations: it + 1, trace: format_trace(&trace) });
        }
    }
    let tol = settings.grad_tol * obj.value.abs().max(1.0);
    if obj.gradient.amax() < 1e3 * tol {
        return Ok(ModeFit { beta, value: obj.value, neg_hess: s_free_hessian(&obj.hessian, &s) });
    }
    Err(Error::NonConvergence { iterations: settings.max_newton, trace: format_trace(&trace) })
}

fn format_trace(trace: &[f64]) -> String {
    let tail = &trace[trace.len().saturating_sub(5)..];
    format!("penalized log likelihood, last values {tail:?}")
}

/// Negative Hessian of the unpenalized log likelihood from the penalized one.
fn s_free_hessian(pen_hess: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = -pen_hess - s;
    symmetrize(&mut h);
    h
}

/// Block-wise pseudo-inverse and log pseudo-determinant of `S_lambda`.
fn penalty_pseudo(model: &Model, lambda: &[f64]) -> (DMatrix<f64>, f64) {
    let p = model.n_coef();
    let mut inv = DMatrix::zeros(p, p);
    let mut log_det = 0.0;
    let mut idx = 0;
    for block in &model.penalties {
        let m = block.size();
        let mut sum = DMatrix::zeros(m, m);
        for c in &block.components {
            sum += c * lambda[idx];
            idx += 1;
        }
        let pi = pseudo_inverse(&sum, block.rank);
        inv.view_mut((block.offset, block.offset), (m, m)).copy_from(&pi.inverse);
        log_det += pi.log_det;
    }
    (inv, log_det)
}

struct Evaluated {
    mode: ModeFit,
    lml: f64,
    chol: Cholesky<f64, Dyn>,
    s_pinv: DMatrix<f64>,
}

fn evaluate(model: &Model, lambda: &[f64], beta0: &DVector<f64>, settings: &FitSettings) -> Result<Evaluated> {
    let mode = find_mode(model, lambda, beta0, settings)?;
    let s = model.total_penalty(lambda);
    let mut precision = &mode.neg_hess + &s;
    symmetrize(&mut precision);
    let (chol, ridge) = cholesky_with_ridge(&precision);
    if ridge > 0.0 {
        debug!("H + S needed a ridge of {ridge:e}");
    }
    let (s_pinv, log_det_s) = penalty_pseudo(model, lambda);
    let lml = mode.value + 0.5 * log_det_s - 0.5 * log_det_chol(&chol);
    Ok(Evaluated { mode, lml, chol, s_pinv })
}

fn initial_lambda(model: &Model, settings: &FitSettings) -> Result<Vec<f64>> {
    if let Some(l) = &settings.initial_lambda {
        if l.len() != model.n_smoothing_params() {
            return Err(Error::Dimension("initial smoothing parameter count mismatch".into()));
        }
        return Ok(l.clone());
    }
    let beta = model.initial_beta();
    let h = -model.log_likelihood_derivatives(&beta).hessian;
    let mut out = Vec::new();
    for block in &model.penalties {
        let m = block.size();
        let h_scale: f64 = (0..m).map(|i| h[(block.offset + i, block.offset + i)].abs()).sum::<f64>() / m as f64;
        for c in &block.components {
            let s_scale = c.diagonal().iter().map(|v| v.abs()).sum::<f64>() / m as f64;
            out.push((0.1 * h_scale / s_scale.max(1e-300)).clamp(1e-6, 1e8));
        }
    }
    Ok(out)
}

/// Estimate coefficients and smoothing parameters at the model's fixed
/// dispersion.
pub fn fit_empirical_bayes(model: &Model, settings: &FitSettings) -> Result<FitState> {
    fit_from(model, settings, None)
}

fn fit_from(model: &Model, settings: &FitSettings, warm: Option<(&DVector<f64>, &[f64])>) -> Result<FitState> {
    let (beta0, mut lambda) = match warm {
        Some((b, l)) => (b.clone(), l.to_vec()),
        None => (model.initial_beta(), initial_lambda(model, settings)?),
    };
    let components = model.penalty_components();
    let mut cur = evaluate(model, &lambda, &beta0, settings)?;
    let mut trace = vec![cur.lml];
    let mut outer = 0;
    let mut converged = false;
    while outer < settings.max_outer {
        outer += 1;
        let v_inv = cur.chol.inverse();
        let beta = &cur.mode.beta;
        let mut log_step = Vec::with_capacity(lambda.len());
        for s_j in &components {
            let numer_full = trace_product(&cur.s_pinv, s_j);
            let numer = (numer_full - trace_product(&v_inv, s_j)).max(1e-12 * numer_full.abs().max(1e-300));
            let denom = beta.dot(&(s_j * beta)).max(1e-300);
            let step = (numer / denom).ln();
            log_step.push(step.clamp(-settings.max_log_step, settings.max_log_step));
        }
        let largest = log_step.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
        if largest < settings.lambda_tol {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut stalled = false;
        let mut scale = 1.0;
        for _ in 0..12 {
            let trial: Vec<f64> = lambda
                .iter()
                .zip(&log_step)
                .map(|(l, s)| (l * (s * scale).exp()).clamp(1e-10, 1e14))
                .collect();
            match evaluate(model, &trial, &cur.mode.beta, settings) {
                Ok(next) if next.lml >= cur.lml - 1e-12 * cur.lml.abs().max(1.0) => {
                    stalled = next.lml - cur.lml < 1e-9 * cur.lml.abs().max(1.0);
                    lambda = trial;
                    cur = next;
                    trace.push(cur.lml);
                    accepted = true;
                    break;
                }
                _ => scale *= 0.5,
            }
            if largest * scale < settings.lambda_tol {
                break;
            }
        }
        if !accepted || stalled {
            // no worthwhile improvement along the update direction
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("smoothing parameter iteration hit the iteration limit");
    }
    let s_lambda = model.total_penalty(&lambda);
    let hessian = cur.mode.neg_hess.clone();
    let v_inv = cur.chol.inverse();
    let edf = trace_product(&v_inv, &hessian);
    let deviance = model.deviance(&cur.mode.beta);
    Ok(FitState {
        beta: cur.mode.beta,
        hessian,
        s_lambda,
        lambda,
        theta: model.theta,
        lml: cur.lml,
        deviance,
        edf,
        outer_iterations: outer,
        lml_trace: trace,
    })
}

/// Fit with the negative binomial dispersion chosen to maximise the Laplace
/// marginal likelihood, by golden-section search over `log theta`.
pub fn fit_with_theta(model: &Model, settings: &FitSettings) -> Result<(FitState, Model)> {
    let (lo, hi) = (0.5f64.ln(), 1e5f64.ln());
    let warm: RefCell<Option<(DVector<f64>, Vec<f64>)>> = RefCell::new(None);
    let last_err: RefCell<Option<Error>> = RefCell::new(None);
    let profile = |log_theta: f64| -> f64 {
        let m = model.clone().with_theta(log_theta.exp());
        let w = warm.borrow().clone();
        let res = match &w {
            Some((b, l)) => fit_from(&m, settings, Some((b, l))).or_else(|_| fit_from(&m, settings, None)),
            None => fit_from(&m, settings, None),
        };
        match res {
            Ok(fit) => {
                *warm.borrow_mut() = Some((fit.beta.clone(), fit.lambda.clone()));
                fit.lml
            }
            Err(e) => {
                *last_err.borrow_mut() = Some(e);
                f64::NEG_INFINITY
            }
        }
    };
    let (log_theta, value) = golden_max(profile, lo, hi, 0.01);
    if !value.is_finite() {
        return Err(last_err.into_inner().unwrap_or(Error::Domain("dispersion search failed".into())));
    }
    let m = model.clone().with_theta(log_theta.exp());
    let fit = fit_empirical_bayes(&m, settings)?;
    Ok((fit, m))
}

/// Gaussian approximation `N(beta_hat, (H + S)^-1)` to the posterior.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    precision: DMatrix<f64>,
    /// Lower Cholesky factor of the precision.
    chol_l: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn new(fit: &FitState) -> Result<Self> {
        let precision = fit.precision();
        let chol = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::LinAlg("posterior precision is not positive definite".into()))?;
        Ok(Self { mean: fit.beta.clone(), chol_l: chol.l(), precision })
    }

    /// `N(mean, cov)`.
    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let mut cov = cov;
        symmetrize(&mut cov);
        let chol = Cholesky::new(cov).ok_or_else(|| Error::LinAlg("covariance is not positive definite".into()))?;
        let mut precision = chol.inverse();
        symmetrize(&mut precision);
        let chol_l = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::LinAlg("precision is not positive definite".into()))?
            .l();
        Ok(Self { mean, precision, chol_l })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        Cholesky::new(self.precision.clone()).expect("checked at construction").inverse()
    }

    /// `L^-T z`, a draw from `N(0, (H + S)^-1)` given standard normal `z`.
    fn scaled(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol_l.transpose().solve_upper_triangular(z).expect("nonsingular factor")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.scaled(&z)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Log density up to a constant.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        -0.5 * d.dot(&(&self.precision * &d))
    }
}

/// An unnormalised log posterior density.
pub trait LogTarget: Sync {
    fn log_density(&self, beta: &DVector<f64>) -> f64;
}

/// The exact penalized posterior of a model at fixed smoothing parameters.
pub struct PenalizedPosterior<'a> {
    pub model: &'a Model,
    s_lambda: DMatrix<f64>,
}

impl<'a> PenalizedPosterior<'a> {
    pub fn new(model: &'a Model, lambda: &[f64]) -> Self {
        Self { model, s_lambda: model.total_penalty(lambda) }
    }
}

impl LogTarget for PenalizedPosterior<'_> {
    fn log_density(&self, beta: &DVector<f64>) -> f64 {
        self.model.log_likelihood(beta) - 0.5 * beta.dot(&(&self.s_lambda * beta))
    }
}

#[derive(Debug, Clone)]
pub struct MhSettings {
    pub target_ess: f64,
    pub burn_in: usize,
    /// Iterations after burn-in whose moments replace the Laplace
    /// approximation in both proposals; 0 keeps the Laplace proposals.
    pub pilot: usize,
    /// Pilot runs, each re-estimating moments from all pilot draws so far.
    pub pilot_rounds: usize,
    /// Scale applied to the pilot covariance for independence proposals.
    pub independence_inflation: f64,
    /// Degrees of freedom of multivariate t independence proposals;
    /// infinite for Gaussian ones.
    pub independence_df: f64,
    /// Initial random-walk shrink factor.
    pub shrink: f64,
    pub target_acceptance: f64,
    pub max_iterations: usize,
    /// Only every `thin`-th state enters the ESS traces and retained draws.
    pub thin: usize,
    /// Number of equally spaced draws retained from the chain.
    pub keep: usize,
}

impl Default for MhSettings {
    fn default() -> Self {
        Self {
            target_ess: 5000.0,
            burn_in: 2000,
            pilot: 20_000,
            pilot_rounds: 10,
            independence_inflation: 1.0,
            independence_df: 5.0,
            shrink: 0.4,
            target_acceptance: 0.23,
            max_iterations: 4_000_000,
            thin: 2,
            keep: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Chain {
    /// Retained draws.
    pub draws: Vec<DVector<f64>>,
    /// Per-coefficient effective sample size of the thinned sampling phase.
    pub ess: Vec<f64>,
    /// Iterations of the sampling phase.
    pub iterations: usize,
    pub independence_acceptance: f64,
    pub random_walk_acceptance: f64,
    pub shrink: f64,
    /// Set when the chain stopped before reaching the target ESS.
    pub warning: Option<String>,
}

impl Chain {
    pub fn min_ess(&self) -> f64 {
        self.ess.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

struct MhState {
    x: DVector<f64>,
    lx: f64,
    /// Independence-proposal log density at `x`.
    qx: f64,
}

/// Independence-proposal log density up to a constant: Gaussian for
/// infinite `df`, otherwise multivariate t with the same location and scale.
fn independence_log_density(ind: &GaussianPosterior, df: f64, x: &DVector<f64>) -> f64 {
    let g = ind.log_density(x);
    if df.is_finite() {
        -0.5 * (df + ind.dim() as f64) * (1.0 - 2.0 * g / df).ln()
    } else {
        g
    }
}

/// One iteration: even iterations draw from `ind`, odd ones take a
/// random-walk step with covariance `exp(2 log_s)` times that of `rw`.
/// Returns (was independence, accepted).
#[allow(clippy::too_many_arguments)]
fn mh_step<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    ind: &GaussianPosterior,
    df: f64,
    rw: &GaussianPosterior,
    st: &mut MhState,
    iter: usize,
    log_s: f64,
    rng: &mut R,
) -> (bool, bool) {
    if iter.is_multiple_of(2) {
        let prop = if df.is_finite() {
            let w: f64 = rng.sample(ChiSquared::new(df).expect("positive degrees of freedom")) / df;
            let z = DVector::from_fn(ind.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            &ind.mean + ind.scaled(&z) / w.sqrt()
        } else {
            ind.sample(rng)
        };
        let lp = target.log_density(&prop);
        let qp = independence_log_density(ind, df, &prop);
        let accept = lp.is_finite() && rng.random::<f64>().ln() < (lp - st.lx) - (qp - st.qx);
        if accept {
            *st = MhState { x: prop, lx: lp, qx: qp };
        }
        (true, accept)
    } else {
        let z = DVector::from_fn(rw.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let prop = &st.x + rw.scaled(&z) * log_s.exp();
        let lp = target.log_density(&prop);
        let accept = lp.is_finite() && rng.random::<f64>().ln() < lp - st.lx;
        if accept {
            st.qx = independence_log_density(ind, df, &prop);
            st.x = prop;
            st.lx = lp;
        }
        (false, accept)
    }
}

/// Robbins-Monro tuning of the random-walk shrink factor toward the target
/// acceptance rate.
#[allow(clippy::too_many_arguments)]
fn tune_shrink<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    ind: &GaussianPosterior,
    rw: &GaussianPosterior,
    st: &mut MhState,
    iterations: usize,
    mut log_s: f64,
    settings: &MhSettings,
    rng: &mut R,
) -> f64 {
    let df = settings.independence_df;
    for it in 0..iterations {
        let (independence, accept) = mh_step(target, ind, df, rw, st, it, log_s, rng);
        if !independence {
            let gain = 1.0 / ((it / 2 + 1) as f64).powf(0.6);
            log_s += gain * (f64::from(u8::from(accept)) - settings.target_acceptance);
            log_s = log_s.clamp(-12.0, 3.0);
        }
    }
    log_s
}

/// Metropolis-Hastings alternating independence proposals with random-walk
/// steps of covariance `s^2 V`.
///
/// Burn-in uses the Laplace approximation `approx` for both (`V = (H + S)^-1`)
/// while `s` is tuned by Robbins-Monro. Pilot rounds then re-estimate mean
/// and covariance from all pilot draws so far, replacing the Laplace moments,
/// since end-of-series coefficients can be strongly skewed. Independence
/// proposals are multivariate t unless `independence_df` is infinite.
/// Proposals are fixed from then on and the chain is extended until every
/// coefficient reaches the target ESS.
pub fn mh_sample<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    approx: &GaussianPosterior,
    settings: &MhSettings,
    rng: &mut R,
) -> Result<Chain> {
    let p = approx.dim();
    let lx = target.log_density(&approx.mean);
    if !lx.is_finite() {
        return Err(Error::Sampler("target density is not finite at the posterior mode".into()));
    }
    let df = settings.independence_df;
    let mut st = MhState { x: approx.mean.clone(), lx, qx: independence_log_density(approx, df, &approx.mean) };
    let mut log_s = tune_shrink(target, approx, approx, &mut st, settings.burn_in, settings.shrink.ln(), settings, rng);

    let (mut ind, mut rw) = (approx.clone(), approx.clone());
    if settings.pilot > p {
        let mut sum = DVector::zeros(p);
        let mut cross = DMatrix::zeros(p, p);
        let mut n = 0.0;
        for _ in 0..settings.pilot_rounds {
            for it in 0..settings.pilot {
                mh_step(target, &ind, df, &rw, &mut st, it, log_s, rng);
                sum += &st.x;
                cross.ger(1.0, &st.x, &st.x, 1.0);
                n += 1.0;
            }
            let mean = &sum / n;
            let cov = (&cross - &mean * mean.transpose() * n) / (n - 1.0);
            match (
                GaussianPosterior::from_moments(mean.clone(), &cov * settings.independence_inflation.powi(2)),
                GaussianPosterior::from_moments(mean, cov),
            ) {
                (Ok(i), Ok(r)) => {
                    ind = i;
                    rw = r;
                    st.qx = independence_log_density(&ind, df, &st.x);
                    log_s = tune_shrink(target, &ind, &rw, &mut st, settings.burn_in, log_s, settings, rng);
                }
                _ => {
                    warn!("pilot covariance is singular; keeping the previous proposals");
                    break;
                }
            }
        }
    }

    let (mut ind_acc, mut ind_n, mut rw_acc, mut rw_n) = (0usize, 0usize, 0usize, 0usize);
    // one trace per coefficient
    let mut traces: Vec<Vec<f64>> = vec![Vec::new(); p];
    let thin = settings.thin.max(1);
    let mut length = ((2.0 * settings.target_ess).ceil() as usize * thin).min(settings.max_iterations);
    let mut it = 0;
    let mut ess;
    loop {
        while it < length {
            let (independence, accept) = mh_step(target, &ind, df, &rw, &mut st, it, log_s, rng);
            it += 1;
            if independence {
                ind_n += 1;
                ind_acc += usize::from(accept);
            } else {
                rw_n += 1;
                rw_acc += usize::from(accept);
            }
            if it % thin == 0 {
                for (t, v) in traces.iter_mut().zip(st.x.iter()) {
                    t.push(*v);
                }
            }
        }
        let total_rate = (ind_acc + rw_acc) as f64 / (ind_n + rw_n).max(1) as f64;
        if total_rate < 0.01 {
            return Err(Error::Sampler(format!(
                "acceptance rate {total_rate:.4} is below 1%; reduce the random-walk shrink factor"
            )));
        }
        ess = traces.par_iter().map(|t| effective_sample_size(t)).collect::<Vec<f64>>();
        let min = ess.iter().cloned().fold(f64::INFINITY, f64::min);
        if min >= settings.target_ess || length >= settings.max_iterations {
            break;
        }
        let grow = (settings.target_ess / min.max(1.0) * 1.2).clamp(1.2, 4.0);
        length = ((length as f64 * grow) as usize).min(settings.max_iterations);
    }
    let min = ess.iter().cloned().fold(f64::INFINITY, f64::min);
    let warning = (min < settings.target_ess).then(|| {
        let w = format!("minimum ESS {min:.0} below target {}", settings.target_ess);
        warn!("{w}");
        w
    });
    let stored = traces[0].len();
    let keep = settings.keep.min(stored).max(1);
    let stride = stored as f64 / keep as f64;
    let draws = (0..keep)
        .map(|i| {
            let k = (i as f64 * stride) as usize;
            DVector::from_fn(p, |j, _| traces[j][k])
        })
        .collect();
    Ok(Chain {
        draws,
        ess,
        iterations: it,
        independence_acceptance: ind_acc as f64 / ind_n.max(1) as f64,
        random_walk_acceptance: rw_acc as f64 / rw_n.max(1) as f64,
        shrink: log_s.exp(),
        warning,
    })
}

/// Autocovariances at lags `0..n` (divisor `n`), via FFT.
fn autocovariance(x: &[f64], mean: f64) -> Vec<f64> {
    let n = x.len();
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (size * n) as f64).collect()
}

/// Effective sample size by Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let acov = autocovariance(x, mean);
    let acov = |lag: usize| acov[lag];
    let g0 = acov(0);
    if g0 <= 0.0 {
        return n as f64;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let mut pair = acov(2 * m) + acov(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev);
        sum += pair;
        prev = pair;
        m += 1;
    }
    let tau = (2.0 * sum / g0 - 1.0).max(1.0 / n as f64);
    n as f64 / tau
}

#[derive(Debug, Clone)]
pub enum Sampler {
    Gaussian,
    MetropolisHastings(MhSettings),
}

#[derive(Debug, Clone)]
pub struct PoolSettings {
    pub fit: FitSettings,
    pub sampler: Sampler,
    /// Draws contributed by each duration distribution.
    pub samples_per_draw: usize,
    pub seed: u64,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self { fit: FitSettings::default(), sampler: Sampler::Gaussian, samples_per_draw: 1000, seed: 1 }
    }
}

/// Summary of the fit for one duration draw.
#[derive(Debug, Clone)]
pub struct DrawSummary {
    pub index: usize,
    pub lambda: Vec<f64>,
    pub deviance: f64,
    pub lml: f64,
    pub edf: f64,
    pub min_ess: Option<f64>,
}

/// Posterior samples pooled over duration distributions.
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    pub draws: Vec<DVector<f64>>,
    /// Index of the duration draw behind each sample.
    pub tags: Vec<usize>,
    /// Incidence path of each sample on the model grid.
    pub incidence: Vec<Vec<f64>>,
    pub grid_days: Vec<i64>,
    pub fits: Vec<DrawSummary>,
    pub failed: usize,
}

impl PosteriorEnsemble {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn bands(&self) -> Bands {
        Bands::from_paths(&self.incidence)
    }

    pub fn peak_distribution(&self) -> PeakDistribution {
        peak_day_distribution(&self.incidence)
    }
}

/// Fit and sample once per duration distribution and pool the results with
/// equal weight. `build` makes the model for a given distribution. Draws are
/// processed in parallel, each with its own random stream.
pub fn pool_over_durations<F>(build: F, ensemble: &DurationEnsemble, settings: &PoolSettings) -> Result<PosteriorEnsemble>
where
    F: Fn(&DurationDist) -> Result<Model> + Sync,
{
    if ensemble.is_empty() {
        return Err(Error::Input("duration ensemble is empty".into()));
    }
    let results: Vec<Result<(Vec<DVector<f64>>, Vec<Vec<f64>>, Vec<i64>, DrawSummary)>> = ensemble
        .draws
        .par_iter()
        .enumerate()
        .map(|(i, dist)| {
            let model = build(dist)?;
            let fit = fit_empirical_bayes(&model, &settings.fit)?;
            let approx = GaussianPosterior::new(&fit)?;
            let mut rng = crate::stream_rng(settings.seed, i as u64);
            let (draws, min_ess) = match &settings.sampler {
                Sampler::Gaussian => (approx.sample_n(settings.samples_per_draw, &mut rng), None),
                Sampler::MetropolisHastings(mh) => {
                    let mut mh = mh.clone();
                    mh.keep = settings.samples_per_draw;
                    let target = PenalizedPosterior::new(&model, &fit.lambda);
                    let chain = mh_sample(&target, &approx, &mh, &mut rng)?;
                    let m = chain.min_ess();
                    (chain.draws, Some(m))
                }
            };
            let paths = draws.iter().map(|b| model.incidence(b)).collect();
            let summary = DrawSummary { index: i, lambda: fit.lambda.clone(), deviance: fit.deviance, lml: fit.lml, edf: fit.edf, min_ess };
            Ok((draws, paths, model.grid_days.clone(), summary))
        })
        .collect();

    let total = results.len();
    let mut out = PosteriorEnsemble { draws: Vec::new(), tags: Vec::new(), incidence: Vec::new(), grid_days: Vec::new(), fits: Vec::new(), failed: 0 };
    for r in results {
        match r {
            Ok((draws, paths, grid, summary)) => {
                out.tags.extend(std::iter::repeat(summary.index).take(draws.len()));
                out.draws.extend(draws);
                out.incidence.extend(paths);
                out.grid_days = grid;
                out.fits.push(summary);
            }
            Err(e) => {
                warn!("duration draw fit failed: {e}");
                out.failed += 1;
            }
        }
    }
    if out.failed * 10 > total || out.fits.is_empty() {
        return Err(Error::Pooling { failed: out.failed, total });
    }
    Ok(out)
}

/// Choose the dispersion by marginal likelihood under `reference`, then pool
/// over `ensemble` at that dispersion. Also returns the reference fit.
pub fn pool_with_dispersion<F>(
    build: F,
    reference: &DurationDist,
    ensemble: &DurationEnsemble,
    settings: &PoolSettings,
) -> Result<(PosteriorEnsemble, FitState, Model)>
where
    F: Fn(&DurationDist) -> Result<Model> + Sync,
{
    let (fit, model) = fit_with_theta(&build(reference)?, &settings.fit)?;
    let theta = model.theta;
    let pooled = pool_over_durations(|d| build(d).map(|m| m.with_theta(theta)), ensemble, settings)?;
    Ok((pooled, fit, model))
}

/// Pointwise posterior quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Bands {
    pub q025: Vec<f64>,
    pub q16: Vec<f64>,
    pub median: Vec<f64>,
    pub q84: Vec<f64>,
    pub q975: Vec<f64>,
}

pub const BAND_PROBS: [f64; 5] = [0.025, 0.16, 0.5, 0.84, 0.975];

impl Bands {
    /// Quantiles across paths at every index; non-finite values are ignored
    /// and an index with no finite values gives NaN.
    pub fn from_paths(paths: &[Vec<f64>]) -> Self {
        let n = paths.first().map_or(0, |p| p.len());
        let mut cols: [Vec<f64>; 5] = Default::default();
        for i in 0..n {
            let mut v: Vec<f64> = paths.iter().map(|p| p[i]).filter(|x| x.is_finite()).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            for (c, &q) in cols.iter_mut().zip(BAND_PROBS.iter()) {
                c.push(quantile_sorted(&v, q));
            }
        }
        let [q025, q16, median, q84, q975] = cols;
        Self { q025, q16, median, q84, q975 }
    }

    pub fn len(&self) -> usize {
        self.median.len()
    }

    pub fn is_empty(&self) -> bool {
        self.median.is_empty()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Posterior probability of each grid index being the peak.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakDistribution {
    pub probs: Vec<f64>,
}

impl PeakDistribution {
    /// Most probable index and its probability; ties go to the earliest.
    pub fn mode(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &p) in self.probs.iter().enumerate() {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }
}

pub fn argmax_first(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Frequencies of the argmax of each path.
pub fn peak_day_distribution(paths: &[Vec<f64>]) -> PeakDistribution {
    let n = paths.first().map_or(0, |p| p.len());
    let mut probs = vec![0.0; n];
    if paths.is_empty() {
        return PeakDistribution { probs };
    }
    for p in paths {
        probs[argmax_first(p)] += 1.0;
    }
    let total = paths.len() as f64;
    probs.iter_mut().for_each(|v| *v /= total);
    PeakDistribution { probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DeathSeries, ModelKind, ModelSpec};
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn simulated_basic(seed: u64, theta: Option<f64>, n: usize) -> (DeathSeries, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                (3.0 + 2.0 * (-(t - 0.4).powi(2) / 0.03).exp()).max(0.0)
            })
            .collect();
        let deaths = truth
            .iter()
            .map(|&f| {
                let mu = f.exp();
                let lam = match theta {
                    Some(th) => rand_distr::Gamma::new(th, mu / th).unwrap().sample(&mut rng),
                    None => mu,
                };
                Poisson::new(lam).unwrap().sample(&mut rng) as u64
            })
            .collect();
        (DeathSeries::new(NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(), deaths).unwrap(), truth)
    }

    fn basic_model(series: &DeathSeries, k: usize) -> Model {
        let mut spec = ModelSpec::new(ModelKind::Basic);
        spec.k = k;
        Model::build(&spec, series, None).unwrap()
    }

    #[test]
    fn ess_of_white_noise_and_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..20000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let e = effective_sample_size(&x);
        assert!((e / 20000.0 - 1.0).abs() < 0.1, "{e}");
        let rho: f64 = 0.9;
        let mut y = vec![0.0; 50000];
        for i in 1..y.len() {
            y[i] = rho * y[i - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let expected = 50000.0 * (1.0 - rho) / (1.0 + rho);
        let e = effective_sample_size(&y);
        assert!((e / expected - 1.0).abs() < 0.25, "{e} vs {expected}");
    }

    #[test]
    fn fellner_schall_never_decreases_marginal_likelihood() {
        let (series, _) = simulated_basic(3, Some(15.0), 120);
        let model = basic_model(&series, 20).with_theta(15.0);
        let fit = fit_empirical_bayes(&model, &FitSettings::default()).unwrap();
        for w in fit.lml_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
        }
        assert!(fit.lambda.iter().all(|&l| l > 0.0));
        assert!(GaussianPosterior::new(&fit).is_ok());
        // mode is a stationary point of the penalized likelihood
        let obj = model.penalized_objective(&fit.beta, &fit.lambda).unwrap();
        assert!(obj.gradient.amax() < 1e-3);
        let (min, max) = crate::linalg::min_max_eigenvalues(&obj.hessian);
        assert!(max < 1e-6 * min.abs());
    }

    #[test]
    fn heavy_penalty_gives_straight_line() {
        let (series, _) = simulated_basic(4, Some(15.0), 60);
        let mut spec = ModelSpec::new(ModelKind::Basic);
        spec.k = 12;
        spec.weekly_k = None;
        let model = Model::build(&spec, &series, None).unwrap().with_theta(15.0);
        let settings = FitSettings::default();
        let mode = find_mode(&model, &[1e10], &model.initial_beta(), &settings).unwrap();
        let f: Vec<f64> = model.incidence(&mode.beta).iter().map(|v| v.ln()).collect();
        let d2 = f.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max);
        assert!(d2 < 1e-4, "{d2}");
    }

    #[test]
    fn unpenalized_full_basis_interpolates() {
        let series = DeathSeries::new(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), vec![5, 9, 4, 12, 7, 3, 8, 10, 6, 11]).unwrap();
        let mut spec = ModelSpec::new(ModelKind::Basic);
        spec.k = 10;
        spec.weekly_k = None;
        let model = Model::build(&spec, &series, None).unwrap().with_theta(5.0);
        let mode = find_mode(&model, &[0.0], &model.initial_beta(), &FitSettings::default()).unwrap();
        assert!(model.deviance(&mode.beta) < 1e-6);
    }

    #[test]
    fn poisson_data_gives_large_theta() {
        let (series, _) = simulated_basic(5, None, 120);
        let model = basic_model(&series, 15);
        let (fit, _) = fit_with_theta(&model, &FitSettings::default()).unwrap();
        assert!(fit.theta > 100.0, "{}", fit.theta);
    }

    #[test]
    fn dispersion_recovered_roughly() {
        let (series, _) = simulated_basic(6, Some(15.0), 150);
        let model = basic_model(&series, 20);
        let (fit, _) = fit_with_theta(&model, &FitSettings::default()).unwrap();
        assert!(fit.theta > 5.0 && fit.theta < 60.0, "{}", fit.theta);
    }

    #[test]
    fn weekly_term_small_without_weekly_cycle() {
        let (series, _) = simulated_basic(7, Some(15.0), 120);
        let model = basic_model(&series, 20);
        let (fit, m) = fit_with_theta(&model, &FitSettings::default()).unwrap();
        let w = m.predict(&fit.beta).weekly;
        let wmax = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(wmax < 0.05, "{wmax} {:?} {}", fit.lambda, fit.theta);
    }

    #[test]
    fn gaussian_sampler_moments() {
        let (series, _) = simulated_basic(8, Some(15.0), 60);
        let mut spec = ModelSpec::new(ModelKind::Basic);
        spec.k = 6;
        spec.weekly_k = None;
        let model = Model::build(&spec, &series, None).unwrap().with_theta(15.0);
        let fit = fit_empirical_bayes(&model, &FitSettings::default()).unwrap();
        let post = GaussianPosterior::new(&fit).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = post.sample_n(n, &mut rng);
        let p = post.dim();
        let mut mean = DVector::zeros(p);
        for d in &draws {
            mean += d;
        }
        mean /= n as f64;
        let cov_true = post.covariance();
        for j in 0..p {
            let se = (cov_true[(j, j)] / n as f64).sqrt();
            assert!((mean[j] - post.mean[j]).abs() < 4.0 * se);
        }
        let mut cov = DMatrix::zeros(p, p);
        for d in &draws {
            let c = d - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        assert!((&cov - &cov_true).norm() / cov_true.norm() < 0.05);
        let again = post.sample_n(3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(again[..], draws[..3]);
    }

    struct Gaussian3 {
        mean: DVector<f64>,
        prec: DMatrix<f64>,
    }

    impl LogTarget for Gaussian3 {
        fn log_density(&self, b: &DVector<f64>) -> f64 {
            let d = b - &self.mean;
            -0.5 * d.dot(&(&self.prec * &d))
        }
    }

    fn toy_fit(mean: DVector<f64>, prec: DMatrix<f64>) -> FitState {
        let p = mean.len();
        FitState {
            beta: mean,
            hessian: prec,
            s_lambda: DMatrix::zeros(p, p),
            lambda: vec![],
            theta: 1.0,
            lml: 0.0,
            deviance: 0.0,
            edf: 0.0,
            outer_iterations: 0,
            lml_trace: vec![],
        }
    }

    #[test]
    fn mh_on_exact_gaussian_matches_moments() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let prec = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let target = Gaussian3 { mean: mean.clone(), prec: prec.clone() };
        let approx = GaussianPosterior::new(&toy_fit(mean.clone(), prec.clone())).unwrap();
        let settings = MhSettings { target_ess: 5000.0, keep: 20_000, pilot: 0, independence_df: f64::INFINITY, ..Default::default() };
        let chain = mh_sample(&target, &approx, &settings, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(chain.min_ess() >= 5000.0);
        assert!(chain.independence_acceptance > 0.99);
        let n = chain.draws.len() as f64;
        let m: DVector<f64> = chain.draws.iter().fold(DVector::zeros(3), |a, d| a + d) / n;
        let cov = approx.covariance();
        for j in 0..3 {
            assert!((m[j] - mean[j]).abs() < 4.0 * (cov[(j, j)] / chain.min_ess()).sqrt());
        }
    }

    /// log of a Gamma(2, 1) variable, with a Gaussian child.
    struct LogGamma;

    impl LogTarget for LogGamma {
        fn log_density(&self, b: &DVector<f64>) -> f64 {
            2.0 * b[0] - b[0].exp() - 2.0 * (b[1] - b[0]).powi(2)
        }
    }

    #[test]
    fn adapted_chain_on_skewed_target() {
        let mode = DVector::from_vec(vec![2f64.ln(), 2f64.ln()]);
        let prec = DMatrix::from_row_slice(2, 2, &[6.0, -4.0, -4.0, 4.0]);
        let approx = GaussianPosterior::new(&toy_fit(mode, prec)).unwrap();
        let settings = MhSettings { target_ess: 20_000.0, pilot: 5000, pilot_rounds: 3, keep: 40_000, ..Default::default() };
        let chain = mh_sample(&LogGamma, &approx, &settings, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(chain.warning.is_none());
        let u: Vec<f64> = chain.draws.iter().map(|d| d[0]).collect();
        let n = u.len() as f64;
        let m = u.iter().sum::<f64>() / n;
        let var = u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        // digamma(2) and trigamma(2)
        let se = (0.644934 / chain.ess[0]).sqrt();
        assert!((m - 0.422784).abs() < 4.0 * se, "{m}");
        assert!((var - 0.644934).abs() < 0.05, "{var}");
        let half = u.len() / 2;
        let (a, b) = (&u[..half], &u[half..]);
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let joint = (0.644934 / effective_sample_size(a) + 0.644934 / effective_sample_size(b)).sqrt();
        assert!((ma - mb).abs() < 3.0 * joint);
    }

    #[test]
    fn fft_autocovariance_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..257).map(|_| rng.random::<f64>()).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let acov = autocovariance(&x, mean);
        for lag in [0, 1, 5, 100, 256] {
            let direct: f64 = (0..x.len() - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / x.len() as f64;
            assert!((acov[lag] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_constructor_inverts_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = GaussianPosterior::from_moments(DVector::zeros(2), cov.clone()).unwrap();
        assert!((g.covariance() - cov).amax() < 1e-12);
        assert!(GaussianPosterior::from_moments(DVector::zeros(2), DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn peak_distribution_conventions() {
        let single = vec![vec![1.0, 3.0, 2.0]; 5];
        assert_eq!(peak_day_distribution(&single).probs, vec![0.0, 1.0, 0.0]);
        let tie = vec![vec![1.0, 3.0, 3.0]];
        assert_eq!(peak_day_distribution(&tie).mode(), (1, 1.0));
        let mut two = vec![vec![5.0, 1.0, 1.0, 1.0]; 3];
        two.extend(vec![vec![1.0, 1.0, 1.0, 5.0]; 7]);
        let pd = peak_day_distribution(&two);
        assert!((pd.probs[0] - 0.3).abs() < 1e-12 && (pd.probs[3] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn bands_are_ordered_quantiles() {
        let paths: Vec<Vec<f64>> = (0..101).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let b = Bands::from_paths(&paths);
        assert_eq!(b.median, vec![50.0, 100.0]);
        assert!((b.q025[0] - 2.5).abs() < 1e-12 && (b.q975[1] - 195.0).abs() < 1e-12);
    }
}
