//! Model checks and sensitivity analyses.
//!
//! Simulated extreme scenarios, forward simulation from a fitted profile,
//! refits on a dilated time axis, the step-change renewal variant, an
//! adjustment for improving survival and a demonstration of why imputing
//! infection days by subtracting random durations fails.

use chrono::NaiveDate;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;

use crate::durations::{delay_matrix, DelayMatrix, DurationDist};
use crate::error::{Error, Result};
use crate::inference::{fit_empirical_bayes, peak_day_distribution, quantile_sorted, FitSettings, FitState, GaussianPosterior};
use crate::models::{deviance_of, DeathSeries, Dilation, Model, ModelKind, ModelSpec, DEFAULT_DILATION};

/// Geometric growth up to a lockdown, an instant drop, then geometric decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioSpec {
    pub doubling_time: f64,
    /// Fraction of the pre-lockdown rate retained on the lockdown day.
    pub drop_factor: f64,
    /// Daily multiplier after lockdown.
    pub decay_rate: f64,
    pub lockdown_day: usize,
    pub horizon: usize,
    /// Expected infections on the day before lockdown.
    pub peak: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self { doubling_time: 3.0, drop_factor: 0.2, decay_rate: 0.95, lockdown_day: 50, horizon: 130, peak: 5000.0 }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.doubling_time > 0.0) {
            return Err(Error::Input("doubling time must be positive".into()));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return Err(Error::Input("drop factor must be in (0, 1]".into()));
        }
        if !(self.decay_rate > 0.0) {
            return Err(Error::Input("decay rate must be positive".into()));
        }
        if self.lockdown_day == 0 || self.lockdown_day >= self.horizon || !(self.peak > 0.0) {
            return Err(Error::Input("lockdown must fall inside the horizon and the peak be positive".into()));
        }
        Ok(())
    }

    /// Expected infections on days `0..horizon`.
    pub fn expected_incidence(&self) -> Vec<f64> {
        let l = self.lockdown_day as f64;
        (0..self.horizon)
            .map(|t| {
                let t = t as f64;
                if t < l {
                    self.peak * 2f64.powf((t - (l - 1.0)) / self.doubling_time)
                } else {
                    self.peak * self.drop_factor * self.decay_rate.powf(t - l)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedEpidemic {
    /// Realised infections by infection day.
    pub infections: Vec<f64>,
    pub expected: Vec<f64>,
    pub series: DeathSeries,
}

impl SimulatedEpidemic {
    /// Realised infections on the grid days of `model`, zero outside the run.
    pub fn truth_on_grid(&self, model: &Model) -> Vec<f64> {
        model
            .grid_days
            .iter()
            .map(|&d| if d >= 0 && (d as usize) < self.infections.len() { self.infections[d as usize] } else { 0.0 })
            .collect()
    }
}

/// Deaths from per-infection durations: an infection on day `t` with
/// duration `d` dies on day `t + round(d)`. Deaths past the run are dropped.
pub fn deaths_from_infections<R: Rng + ?Sized>(infections: &[u64], dist: &DurationDist, rng: &mut R) -> Vec<u64> {
    let n = infections.len();
    let mut deaths = vec![0u64; n];
    for (t, &count) in infections.iter().enumerate() {
        for _ in 0..count {
            let lag = dist.sample(rng).round();
            if lag.is_finite() && lag >= 0.0 {
                let day = t + lag as usize;
                if day < n {
                    deaths[day] += 1;
                }
            }
        }
    }
    deaths
}

/// Poisson infections from an expected path, then deaths from `dist`.
/// `start` dates day 0, and the series carries a `lockdown` anchor when
/// `lockdown_day` is given.
pub fn simulate_from_expected<R: Rng + ?Sized>(
    expected: &[f64],
    dist: &DurationDist,
    start: NaiveDate,
    lockdown_day: Option<usize>,
    rng: &mut R,
) -> Result<SimulatedEpidemic> {
    let mut infections = Vec::with_capacity(expected.len());
    for &m in expected {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::Input(format!("invalid expected incidence {m}")));
        }
        let k = if m > 0.0 { Poisson::new(m).map_err(|e| Error::Input(e.to_string()))?.sample(rng) as u64 } else { 0 };
        infections.push(k);
    }
    let deaths = deaths_from_infections(&infections, dist, rng);
    let mut series = DeathSeries::new(start, deaths)?;
    if let Some(l) = lockdown_day {
        series = series.with_anchor("lockdown", start + chrono::Duration::days(l as i64));
    }
    Ok(SimulatedEpidemic { infections: infections.iter().map(|&k| k as f64).collect(), expected: expected.to_vec(), series })
}

/// The extreme scenario with lockdown on 24 March 2020.
pub fn simulate_extreme<R: Rng + ?Sized>(spec: &ScenarioSpec, dist: &DurationDist, rng: &mut R) -> Result<SimulatedEpidemic> {
    spec.validate()?;
    let lockdown = NaiveDate::from_ymd_opt(2020, 3, 24).expect("valid date");
    let start = lockdown - chrono::Duration::days(spec.lockdown_day as i64);
    simulate_from_expected(&spec.expected_incidence(), dist, start, Some(spec.lockdown_day), rng)
}

/// Expected deaths per day for expected infections on days `0..n`.
pub fn expected_deaths(expected: &[f64], dist: &DurationDist) -> Result<Vec<f64>> {
    // infection day t sits at grid index t + 1
    let n = expected.len();
    let b = delay_matrix(dist, n)?;
    let mut grid = vec![0.0; n];
    grid[1..].copy_from_slice(&expected[..n - 1]);
    Ok(b.apply(&grid))
}

/// Pointwise summary of death series simulated forward from a profile.
#[derive(Debug, Clone)]
pub struct SanityEnvelope {
    pub mean: Vec<f64>,
    pub simulations: Vec<Vec<f64>>,
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SanityEnvelope {
    /// Fraction of days on which `observed` lies inside the envelope.
    pub fn coverage(&self, observed: &[f64]) -> f64 {
        let inside = observed
            .iter()
            .enumerate()
            .filter(|&(i, &y)| y >= self.lower[i] && y <= self.upper[i])
            .count();
        inside as f64 / observed.len().max(1) as f64
    }
}

/// Negative binomial draw with mean `mu` and size `theta`; Poisson when
/// `theta` is infinite.
pub fn sample_negative_binomial<R: Rng + ?Sized>(mu: f64, theta: f64, rng: &mut R) -> Result<u64> {
    if mu <= 0.0 {
        return Ok(0);
    }
    let rate = if theta.is_finite() {
        Gamma::new(theta, mu / theta).map_err(|e| Error::Input(e.to_string()))?.sample(rng)
    } else {
        mu
    };
    if rate <= 0.0 {
        return Ok(0);
    }
    Ok(Poisson::new(rate).map_err(|e| Error::Input(e.to_string()))?.sample(rng) as u64)
}

/// Simulate `n_reps` death series with mean `B f_c` times the weekly factor
/// and return the pointwise 95% envelope.
pub fn forward_sanity<R: Rng + ?Sized>(
    fc: &[f64],
    delay: &DelayMatrix,
    weekly: Option<&[f64]>,
    theta: f64,
    n_reps: usize,
    rng: &mut R,
) -> Result<SanityEnvelope> {
    if fc.len() != delay.n() || weekly.is_some_and(|w| w.len() != fc.len()) {
        return Err(Error::Dimension("profile and delay sizes differ".into()));
    }
    if n_reps == 0 || !(theta > 0.0) {
        return Err(Error::Input("need at least one replicate and theta > 0".into()));
    }
    let mut mean = delay.apply(fc);
    if let Some(w) = weekly {
        mean.iter_mut().zip(w).for_each(|(m, w)| *m *= w.exp());
    }
    let mut simulations = Vec::with_capacity(n_reps);
    for _ in 0..n_reps {
        let sim: Result<Vec<f64>> = mean.iter().map(|&m| sample_negative_binomial(m, theta, rng).map(|k| k as f64)).collect();
        simulations.push(sim?);
    }
    let (mut lower, mut median, mut upper) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..mean.len() {
        let mut col: Vec<f64> = simulations.iter().map(|s| s[t]).collect();
        col.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&col, 0.025));
        median.push(quantile_sorted(&col, 0.5));
        upper.push(quantile_sorted(&col, 0.975));
    }
    Ok(SanityEnvelope { mean, simulations, lower, median, upper })
}

/// Forward simulation from the posterior median profile of a fitted model.
pub fn forward_sanity_from_fit<R: Rng + ?Sized>(model: &Model, fc_median: &[f64], fit: &FitState, n_reps: usize, rng: &mut R) -> Result<SanityEnvelope> {
    let delay = model.delay().ok_or_else(|| Error::Input("forward simulation needs a delay model".into()))?;
    let weekly = model.predict(&fit.beta).weekly;
    forward_sanity(fc_median, delay, Some(&weekly), fit.theta, n_reps, rng)
}

/// Posterior probability of each grid day being the incidence peak.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakReport {
    pub days: Vec<i64>,
    pub probs: Vec<f64>,
}

impl PeakReport {
    /// Most probable peak day and its probability; the earliest on ties.
    pub fn mode(&self) -> (i64, f64) {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        (self.days[best], self.probs[best])
    }

    pub fn prob_of(&self, day: i64) -> f64 {
        self.days.iter().position(|&d| d == day).map_or(0.0, |i| self.probs[i])
    }

    pub fn prob_before(&self, day: i64) -> f64 {
        self.days.iter().zip(&self.probs).filter(|(d, _)| **d < day).map(|(_, p)| p).sum()
    }
}

/// Peak-day distribution from `n` Gaussian posterior samples.
pub fn peak_report<R: Rng + ?Sized>(model: &Model, fit: &FitState, n: usize, rng: &mut R) -> Result<PeakReport> {
    let post = GaussianPosterior::new(fit)?;
    let paths: Vec<Vec<f64>> = post.sample_n(n, rng).iter().map(|b| model.incidence(b)).collect();
    let dist = peak_day_distribution(&paths);
    Ok(PeakReport { days: model.grid_days.clone(), probs: dist.probs })
}

#[derive(Debug, Clone)]
pub struct CheckFit {
    pub model: Model,
    pub fit: FitState,
    pub peak: PeakReport,
}

fn fit_and_report<R: Rng + ?Sized>(model: Model, settings: &FitSettings, n_samples: usize, rng: &mut R) -> Result<CheckFit> {
    let fit = fit_empirical_bayes(&model, settings)?;
    let peak = peak_report(&model, &fit, n_samples, rng)?;
    Ok(CheckFit { model, fit, peak })
}

/// Refit with `f_c` and its penalty on a time axis stretched around the
/// anchor day.
pub fn refit_dilated<R: Rng + ?Sized>(
    spec: &ModelSpec,
    series: &DeathSeries,
    dist: &DurationDist,
    anchor_day: i64,
    weights: Option<(f64, f64, f64)>,
    settings: &FitSettings,
    n_samples: usize,
    rng: &mut R,
) -> Result<CheckFit> {
    let mut spec = spec.clone();
    spec.dilation = Some(Dilation { anchor_day, weights: weights.unwrap_or(DEFAULT_DILATION) });
    let model = Model::build(&spec, series, Some(dist))?;
    fit_and_report(model, settings, n_samples, rng)
}

/// Plain fit with the same reporting as [`refit_dilated`].
pub fn fit_undilated<R: Rng + ?Sized>(
    spec: &ModelSpec,
    series: &DeathSeries,
    dist: &DurationDist,
    settings: &FitSettings,
    n_samples: usize,
    rng: &mut R,
) -> Result<CheckFit> {
    let mut spec = spec.clone();
    spec.dilation = None;
    let model = Model::build(&spec, series, Some(dist))?;
    fit_and_report(model, settings, n_samples, rng)
}

/// Outcome of the renewal model with a forced step in `log R` at the anchor.
#[derive(Debug, Clone)]
pub struct StepCheck {
    pub model: Model,
    pub fit: FitState,
    /// Posterior mode estimate of `R` on the eve of the anchor.
    pub r_eve: f64,
    pub r_anchor: f64,
    pub step: f64,
    /// Posterior standard deviation of `log R` by grid index.
    pub log_r_sd: Vec<f64>,
    /// Set when `log R` is much less certain next to the step than elsewhere.
    pub boundary_artefact: bool,
}

/// Fit the renewal model with a step change in `log R` from `anchor_day`.
pub fn renewal_step_variant(spec: &ModelSpec, series: &DeathSeries, dist: &DurationDist, anchor_day: i64, settings: &FitSettings) -> Result<StepCheck> {
    if spec.kind != ModelKind::Renewal {
        return Err(Error::Input("the step variant needs the renewal model".into()));
    }
    let mut spec = spec.clone();
    spec.renewal.step_day = Some(anchor_day);
    let model = Model::build(&spec, series, Some(dist))?;
    let fit = fit_empirical_bayes(&model, settings)?;
    let r = model.reproduction_number(&fit.beta).expect("renewal model");
    let idx = model
        .grid_days
        .iter()
        .position(|&d| d == anchor_day)
        .filter(|&i| i > 0)
        .ok_or_else(|| Error::Input(format!("anchor day {anchor_day} is not interior to the grid")))?;
    let step_col = model.n_incidence_coef() - 1;
    let log_r_sd = log_r_uncertainty(&model, &fit)?;
    let mut sorted = log_r_sd.clone();
    sorted.sort_by(f64::total_cmp);
    let typical = quantile_sorted(&sorted, 0.5);
    let near = log_r_sd[idx - 1].max(log_r_sd[idx]);
    Ok(StepCheck {
        r_eve: r[idx - 1],
        r_anchor: r[idx],
        step: fit.beta[step_col],
        boundary_artefact: near > 2.0 * typical,
        log_r_sd,
        model,
        fit,
    })
}

fn log_r_uncertainty(model: &Model, fit: &FitState) -> Result<Vec<f64>> {
    let cov = GaussianPosterior::new(fit)?.covariance();
    let p = model.n_coef();
    let n = model.grid_days.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        // finite differences of log R along unit coefficient directions
        let base = model.reproduction_number(&fit.beta).expect("renewal model")[t].ln();
        let mut row = DVector::zeros(p);
        for j in 1..model.n_incidence_coef() {
            let mut b = fit.beta.clone();
            b[j] += 1.0;
            row[j] = model.reproduction_number(&b).expect("renewal model")[t].ln() - base;
        }
        out.push((row.transpose() * &cov * &row)[(0, 0)].max(0.0).sqrt());
    }
    Ok(out)
}

/// Deaths rescaled for survival improving by `rate` per day from
/// `start_day`, along with the per-day factor applied.
pub fn ifr_adjust(series: &DeathSeries, rate: f64, start_day: usize) -> Result<(DeathSeries, Vec<f64>)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Input(format!("improvement rate {rate} must be in (0, 1]")));
    }
    if start_day >= series.len() {
        return Err(Error::Input("adjustment start lies outside the series".into()));
    }
    let ratio: Vec<f64> = (0..series.len())
        .map(|t| if t < start_day { 1.0 } else { rate.powi(-((t - start_day) as i32)) })
        .collect();
    let mut adjusted = series.clone();
    adjusted.deaths.iter_mut().zip(&ratio).for_each(|(y, r)| *y *= r);
    Ok((adjusted, ratio))
}

/// Incidence imputed by subtracting random durations from death days,
/// compared with what that incidence implies for deaths.
#[derive(Debug, Clone)]
pub struct ImputationReport {
    /// Mean imputed infections on grid days `-1..n-1`.
    pub imputed: Vec<f64>,
    pub implied_deaths: Vec<f64>,
    pub deviance: f64,
}

impl ImputationReport {
    pub fn deviance_ratio(&self, proper_deviance: f64) -> f64 {
        self.deviance / proper_deviance
    }
}

/// Average over `n_reps` replicate imputations in which each death on day
/// `t` is assigned to infection day `t - round(d)` with `d` drawn from
/// `dist`. Replicates run in parallel on streams of `seed`.
pub fn naive_imputation_demo(series: &DeathSeries, dist: &DurationDist, theta: f64, n_reps: usize, seed: u64) -> Result<ImputationReport> {
    if n_reps == 0 {
        return Err(Error::Input("need at least one replicate".into()));
    }
    let n = series.len();
    let deaths: Vec<u64> = series.deaths.iter().map(|&y| y.round().max(0.0) as u64).collect();
    let totals: Vec<Vec<f64>> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = crate::stream_rng(seed, r as u64);
            let mut out = vec![0.0; n];
            for (t, &k) in deaths.iter().enumerate() {
                for _ in 0..k {
                    let lag = dist.sample(&mut rng).round();
                    // grid index of infection day t - lag is t - lag + 1
                    let g = t as f64 - lag + 1.0;
                    if g >= 0.0 && (g as usize) < n {
                        out[g as usize] += 1.0;
                    }
                }
            }
            out
        })
        .collect();
    let mut imputed = vec![0.0; n];
    for v in &totals {
        imputed.iter_mut().zip(v).for_each(|(a, b)| *a += b / n_reps as f64);
    }
    let b = delay_matrix(dist, n)?;
    let implied_deaths = b.apply(&imputed);
    let deviance = deviance_of(&series.deaths, &implied_deaths, theta);
    Ok(ImputationReport { imputed, implied_deaths, deviance })
}

/// The largest ratio `path[a] / path[b]` over `a < b <= a + width` with
/// both ends within `width` days of grid index `at`.
pub fn max_local_drop(path: &[f64], at: usize, width: usize) -> f64 {
    let lo = at.saturating_sub(width);
    let hi = (at + width).min(path.len() - 1);
    let mut best = 0.0f64;
    for a in lo..=hi {
        for b in a + 1..=(a + width).min(hi) {
            if path[b] > 0.0 {
                best = best.max(path[a] / path[b]);
            }
        }
    }
    best
}

/// Mean daily log slope of `path` over grid indices `from..to`.
pub fn mean_log_slope(path: &[f64], from: usize, to: usize) -> f64 {
    (path[to].max(1e-12).ln() - path[from].max(1e-12).ln()) / (to - from) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist() -> DurationDist {
        DurationDist::lognormal(3.19, 0.44).unwrap()
    }

    #[test]
    fn scenario_drops_by_the_stated_factor() {
        let s = ScenarioSpec::default();
        let f = s.expected_incidence();
        let l = s.lockdown_day;
        assert!((f[l - 1] / f[l] - 5.0).abs() < 1e-12);
        assert!((f[l - 1] / f[l - 4] - 2.0).abs() < 1e-12);
        assert!((f[l + 1] / f[l] - 0.95).abs() < 1e-12);
        assert!(ScenarioSpec { drop_factor: 0.0, ..s }.validate().is_err());
    }

    #[test]
    fn null_scenario_keeps_growing_through_lockdown() {
        let g = 2f64.powf(1.0 / 3.0);
        let s = ScenarioSpec { drop_factor: 1.0, decay_rate: g, ..Default::default() };
        let f = s.expected_incidence();
        let l = s.lockdown_day;
        // growth pauses for the lockdown day only, with no drop
        assert!((f[l] - f[l - 1]).abs() < 1e-9);
        for (t, w) in f.windows(2).enumerate() {
            if t + 1 != l {
                assert!((w[1] / w[0] - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simulated_deaths_match_the_convolution() {
        let s = ScenarioSpec { peak: 200.0, horizon: 90, lockdown_day: 45, ..Default::default() };
        let d = dist();
        let expected = expected_deaths(&s.expected_incidence(), &d).unwrap();
        let reps = 500;
        let sims: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = crate::stream_rng(9, r);
                simulate_extreme(&s, &d, &mut rng).unwrap().series.deaths
            })
            .collect();
        for t in 20..90 {
            let v: Vec<f64> = sims.iter().map(|x| x[t]).collect();
            let m = v.iter().sum::<f64>() / reps as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
            let se = (var / reps as f64).sqrt().max(0.02);
            // rounding to whole days is only approximately the midpoint rule
            assert!((m - expected[t]).abs() < 3.0 * se + 0.02 * expected[t], "day {t}: {m} vs {}", expected[t]);
        }
    }

    #[test]
    fn forward_simulation_is_seeded_and_poisson_in_the_limit() {
        let d = dist();
        let b = delay_matrix(&d, 80).unwrap();
        let fc: Vec<f64> = (0..80).map(|t| 100.0 * (-(t as f64 - 30.0).powi(2) / 200.0).exp()).collect();
        let run = |seed| forward_sanity(&fc, &b, None, 10.0, 50, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(1).simulations, run(1).simulations);
        let nb = forward_sanity(&fc, &b, None, 0.5, 400, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let big = forward_sanity(&fc, &b, None, 1e9, 400, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let pois = forward_sanity(&fc, &b, None, f64::INFINITY, 400, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let t = 60;
        assert!(nb.upper[t] - nb.lower[t] > big.upper[t] - big.lower[t]);
        let width = |e: &SanityEnvelope| e.upper[t] - e.lower[t];
        assert!((width(&big) - width(&pois)).abs() <= 0.25 * width(&pois) + 2.0);
    }

    #[test]
    fn sanity_envelope_covers_data_from_the_model() {
        let d = dist();
        let b = delay_matrix(&d, 100).unwrap();
        let fc: Vec<f64> = (0..100).map(|t| 500.0 * (-(t as f64 - 40.0).powi(2) / 300.0).exp()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let env = forward_sanity(&fc, &b, None, 20.0, 100, &mut rng).unwrap();
        let obs: Vec<f64> = env.mean.iter().map(|&m| sample_negative_binomial(m, 20.0, &mut rng).unwrap() as f64).collect();
        assert!(env.coverage(&obs) >= 0.9);
    }

    #[test]
    fn ifr_adjustment_identity_and_mass() {
        let series = DeathSeries::new(NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(), (0..40).map(|t| 10 + t).collect()).unwrap();
        let (same, r) = ifr_adjust(&series, 1.0, 10).unwrap();
        assert_eq!(same.deaths, series.deaths);
        assert!(r.iter().all(|&v| v == 1.0));
        let (adj, ratio) = ifr_adjust(&series, 0.985, 10).unwrap();
        let expect: f64 = series.deaths.iter().zip(&ratio).map(|(y, r)| y * r).sum();
        assert_eq!(adj.deaths.iter().sum::<f64>(), expect);
        assert!(ratio.windows(2).skip(10).all(|w| w[1] > w[0]));
        assert!(ifr_adjust(&series, 0.985, 40).is_err());
    }

    #[test]
    fn imputation_is_valid_only_at_equilibrium() {
        let d = dist();
        let flat = DeathSeries::new(NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(), vec![200; 150]).unwrap();
        let rep = naive_imputation_demo(&flat, &d, 20.0, 20, 1).unwrap();
        // away from both ends the implied deaths reproduce the data
        for t in 80..110 {
            assert!((rep.implied_deaths[t] - 200.0).abs() < 10.0, "{t}: {}", rep.implied_deaths[t]);
        }
    }

    #[test]
    fn imputation_is_the_cross_correlation_in_expectation() {
        let d = dist();
        let n = 120;
        let deaths: Vec<u64> = (0..n).map(|t| (3000.0 * (-(t as f64 - 70.0).powi(2) / 300.0).exp()) as u64).collect();
        let series = DeathSeries::new(NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(), deaths.clone()).unwrap();
        let rep = naive_imputation_demo(&series, &d, 20.0, 40, 5).unwrap();
        // probability that a duration rounds to m days
        let p = |m: i64| if m < 0 { 0.0 } else { d.cdf(m as f64 + 0.5) - d.cdf((m as f64 - 0.5).max(0.0)) };
        for g in 20..80 {
            let s = g as i64 - 1;
            let e: f64 = deaths.iter().enumerate().map(|(t, &y)| y as f64 * p(t as i64 - s)).sum();
            let se = (e / 40.0).sqrt().max(0.05);
            assert!((rep.imputed[g] - e).abs() < 4.0 * se, "{g}: {} vs {e}", rep.imputed[g]);
        }
    }

    #[test]
    fn local_drop_and_slope() {
        let path = vec![1.0, 2.0, 4.0, 8.0, 1.6, 1.5, 1.4];
        assert!((max_local_drop(&path, 3, 3) - 8.0 / 1.4).abs() < 1e-12);
        assert!((mean_log_slope(&path, 0, 3) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_variant_requires_renewal() {
        let series = DeathSeries::new(NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(), vec![5; 60]).unwrap();
        let spec = ModelSpec::new(ModelKind::Incidence);
        assert!(renewal_step_variant(&spec, &series, &dist(), 30, &FitSettings::default()).is_err());
    }
}
