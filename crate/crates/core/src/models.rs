//! Observation models for daily death counts.
//!
//! All three models share the negative binomial observation layer
//! `log mu = log delta + f_w(day of week)` and differ in how the expected
//! deaths `delta` are produced:
//!
//! * basic: `delta = exp(f(t))`, a smooth death-rate curve,
//! * incidence: `delta = B f_c` with `f_c = exp(X beta)` the fatal incidence,
//! * renewal: `f_c = ifr * c` where `c` follows a renewal equation driven by a
//!   smooth `log R_t`.

use chrono::{Datelike, Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::durations::{delay_matrix, DelayMatrix, DurationDist};
use crate::error::{Error, Result};
use crate::linalg::psd_rank;
use crate::splines::{adaptive_penalty, cubic_basis, cyclic_basis, dilate_grid, SmoothTerm};

/// A contiguous daily death series.
#[derive(Debug, Clone, PartialEq)]
pub struct DeathSeries {
    pub start: NaiveDate,
    pub deaths: Vec<f64>,
    /// Named calendar dates such as interventions.
    pub anchors: Vec<(String, NaiveDate)>,
}

impl DeathSeries {
    pub fn new(start: NaiveDate, deaths: Vec<u64>) -> Result<Self> {
        if deaths.is_empty() {
            return Err(Error::Input("death series is empty".into()));
        }
        Ok(Self { start, deaths: deaths.into_iter().map(|d| d as f64).collect(), anchors: Vec::new() })
    }

    pub fn with_anchor(mut self, name: &str, date: NaiveDate) -> Self {
        self.anchors.push((name.to_string(), date));
        self
    }

    pub fn len(&self) -> usize {
        self.deaths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deaths.is_empty()
    }

    pub fn date(&self, day: i64) -> NaiveDate {
        self.start + Duration::days(day)
    }

    /// Day offset of `date` from the series start.
    pub fn day_of(&self, date: NaiveDate) -> i64 {
        (date - self.start).num_days()
    }

    /// Day of week, Monday = 1 to Sunday = 7.
    pub fn weekday(&self, day: usize) -> u32 {
        self.date(day as i64).weekday().number_from_monday()
    }

    pub fn anchor(&self, name: &str) -> Option<NaiveDate> {
        self.anchors.iter().find(|a| a.0 == name).map(|a| a.1)
    }

    /// Earliest anchor, if any.
    pub fn first_anchor(&self) -> Option<NaiveDate> {
        self.anchors.iter().map(|a| a.1).min()
    }
}

/// Negative binomial deviance of one observation and its first two
/// derivatives with respect to the mean.
#[derive(Debug, Clone, Copy)]
pub struct DevianceTerms {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn nb_deviance(y: f64, mu: f64, theta: f64) -> Result<DevianceTerms> {
    if !(mu > 0.0) {
        return Err(Error::Domain(format!("mean must be positive, got {mu}")));
    }
    if !(theta > 0.0) {
        return Err(Error::Domain(format!("dispersion must be positive, got {theta}")));
    }
    let value = 2.0 * y * (y.max(1.0) / mu).ln() - 2.0 * (y + theta) * ((y + theta) / (mu + theta)).ln();
    let d1 = 2.0 * ((y + theta) / (mu + theta) - y / mu);
    let d2 = 2.0 * (y / (mu * mu) - (y + theta) / ((mu + theta) * (mu + theta)));
    Ok(DevianceTerms { value, d1, d2 })
}

/// Negative binomial log probability of `y` with mean `mu`, dispersion `theta`.
pub fn nb_log_likelihood(y: f64, mu: f64, theta: f64) -> f64 {
    ln_gamma(y + theta) - ln_gamma(theta) - ln_gamma(y + 1.0) + theta * theta.ln() + y * mu.ln()
        - (y + theta) * (mu + theta).ln()
}

/// First and second derivatives of the log likelihood in `mu`.
fn nb_mu_derivatives(y: f64, mu: f64, theta: f64) -> (f64, f64) {
    let a = y / mu - (y + theta) / (mu + theta);
    let b = -y / (mu * mu) + (y + theta) / ((mu + theta) * (mu + theta));
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Basic,
    Incidence,
    Renewal,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Self::Basic),
            "incidence" => Ok(Self::Incidence),
            "renewal" => Ok(Self::Renewal),
            other => Err(Error::Input(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Basic => "basic",
            Self::Incidence => "incidence",
            Self::Renewal => "renewal",
        })
    }
}

/// Time dilation of the incidence basis around an anchor day.
#[derive(Debug, Clone, Copy)]
pub struct Dilation {
    /// Day offset from the series start.
    pub anchor_day: i64,
    pub weights: (f64, f64, f64),
}

pub const DEFAULT_DILATION: (f64, f64, f64) = (3.5, 6.0, 3.5);

pub const DEFAULT_IFR: f64 = 0.006;
pub const DEFAULT_POPULATION: f64 = 66e6;
/// Generation-interval truncation horizon in days.
pub const GENERATION_HORIZON: usize = 60;

#[derive(Debug, Clone, Copy)]
pub struct RenewalSettings {
    pub population: f64,
    pub ifr: f64,
    /// Adds an unpenalized step in `log R` starting on this day offset.
    pub step_day: Option<i64>,
    /// Day offset where the default initializer switches from growth to decline.
    pub switch_day: Option<i64>,
}

impl Default for RenewalSettings {
    fn default() -> Self {
        Self { population: DEFAULT_POPULATION, ifr: DEFAULT_IFR, step_day: None, switch_day: None }
    }
}

/// Everything needed to build a model on a death series, except the data
/// and the duration distribution.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Basis dimension of the smooth time term.
    pub k: usize,
    /// Number of adaptive penalty components; `None` for a single penalty.
    pub adaptive: Option<usize>,
    /// Basis dimension of the cyclic weekly term; `None` drops it.
    pub weekly_k: Option<usize>,
    pub dilation: Option<Dilation>,
    pub theta: f64,
    pub renewal: RenewalSettings,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            k: 30,
            adaptive: None,
            weekly_k: Some(7),
            dilation: None,
            theta: 10.0,
            renewal: RenewalSettings::default(),
        }
    }
}

/// Penalty matrices acting on a contiguous block of coefficients.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub offset: usize,
    pub components: Vec<DMatrix<f64>>,
    /// Rank of the sum of the components.
    pub rank: usize,
}

impl PenaltyBlock {
    pub fn size(&self) -> usize {
        self.components[0].nrows()
    }
}

/// Generation interval weights `g_1..g_60` of the gamma with mean 6.5 days.
pub fn generation_interval() -> Vec<f64> {
    let shape = 6.5 * 0.62f64.powi(2);
    let scale = 0.62f64.powi(-2);
    let g = Gamma::new(shape, 1.0 / scale).expect("constant parameters");
    (1..=GENERATION_HORIZON)
        .map(|j| {
            let lo = if j == 1 { 0.0 } else { j as f64 - 0.5 };
            g.cdf(j as f64 + 0.5) - g.cdf(lo)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Renewal {
    /// Design of `log R_t` on the infection grid (including any step column).
    design: DMatrix<f64>,
    generation: Vec<f64>,
    population: f64,
    ifr: f64,
}

#[derive(Debug, Clone)]
enum IncidenceMap {
    LogSpline { design: DMatrix<f64> },
    Renewal(Renewal),
}

/// Fatal incidence and its derivatives with respect to the incidence
/// coefficients.
struct IncidenceJet {
    fc: Vec<f64>,
    jac: DMatrix<f64>,
    /// Per grid day second derivative matrices; empty for the log spline whose
    /// second derivatives are formed directly.
    second: Vec<DMatrix<f64>>,
}

/// Predicted quantities at a coefficient vector.
#[derive(Debug, Clone)]
pub struct LinkState {
    pub fc: Vec<f64>,
    pub delta: Vec<f64>,
    pub mu: Vec<f64>,
    pub weekly: Vec<f64>,
}

/// Penalized log likelihood with its gradient and Hessian.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// A model bound to a death series.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    y: Vec<f64>,
    delay: Option<DelayMatrix>,
    incidence: IncidenceMap,
    weekly: Option<DMatrix<f64>>,
    pub penalties: Vec<PenaltyBlock>,
    pub theta: f64,
    /// Smooth term of `log f_c`, `log R` or `f`.
    pub time_term: SmoothTerm,
    /// Grid day offsets (relative to the series start) of the incidence vector.
    pub grid_days: Vec<i64>,
    n_inc: usize,
    n_week: usize,
    start: NaiveDate,
    init_switch: Option<usize>,
}

impl Model {
    /// Build a model. `dist` is required for the incidence and renewal kinds.
    pub fn build(spec: &ModelSpec, series: &DeathSeries, dist: Option<&DurationDist>) -> Result<Self> {
        let n = series.len();
        if !(spec.theta > 0.0) {
            return Err(Error::Input("theta must be positive".into()));
        }
        // Infections on grid index j occur one day before deaths on day j.
        let shift = if spec.kind == ModelKind::Basic { 0 } else { 1 };
        let grid_days: Vec<i64> = (0..n as i64).map(|j| j - shift).collect();
        let grid: Vec<f64> = grid_days.iter().map(|&d| d as f64).collect();
        let spline_grid = match spec.dilation {
            Some(d) => dilate_grid(&grid, d.anchor_day as f64, d.weights)?,
            None => grid.clone(),
        };
        let time_term = match spec.adaptive {
            Some(m) => adaptive_penalty(&spline_grid, spec.k, m)?,
            None => cubic_basis(&spline_grid, spec.k)?,
        };
        let k = time_term.ncol();

        let delay = match spec.kind {
            ModelKind::Basic => None,
            _ => {
                let dist = dist.ok_or_else(|| Error::Input("a duration distribution is required".into()))?;
                Some(delay_matrix(dist, n)?)
            }
        };

        let mut penalties = Vec::new();
        let sum_components = |c: &[DMatrix<f64>]| c.iter().skip(1).fold(c[0].clone(), |a, b| a + b);
        let (incidence, n_inc, init_switch) = match spec.kind {
            ModelKind::Basic | ModelKind::Incidence => {
                penalties.push(PenaltyBlock {
                    offset: 0,
                    rank: psd_rank(&sum_components(&time_term.penalties), 1e-9),
                    components: time_term.penalties.clone(),
                });
                (IncidenceMap::LogSpline { design: time_term.design.clone() }, k, None)
            }
            ModelKind::Renewal => {
                let rs = spec.renewal;
                if !(rs.population > 0.0) || !(rs.ifr > 0.0 && rs.ifr < 1.0) {
                    return Err(Error::Input("renewal needs N > 0 and 0 < ifr < 1".into()));
                }
                let step_idx = match rs.step_day {
                    Some(d) => Some(grid_index(&grid_days, d)?),
                    None => None,
                };
                let extra = usize::from(step_idx.is_some());
                let mut design = DMatrix::zeros(n, k + extra);
                design.view_mut((0, 0), (n, k)).copy_from(&time_term.design);
                if let Some(s) = step_idx {
                    for t in s..n {
                        design[(t, k)] = 1.0;
                    }
                }
                // coefficient 0 is log c_1, then the log R spline, then the step
                penalties.push(PenaltyBlock {
                    offset: 1,
                    rank: psd_rank(&sum_components(&time_term.penalties), 1e-9),
                    components: time_term.penalties.clone(),
                });
                let switch = rs
                    .switch_day
                    .or(rs.step_day)
                    .or_else(|| series.first_anchor().map(|a| series.day_of(a)))
                    .map(|d| grid_index(&grid_days, d).unwrap_or(n / 2));
                let renewal = Renewal { design, generation: generation_interval(), population: rs.population, ifr: rs.ifr };
                (IncidenceMap::Renewal(renewal), 1 + k + extra, switch)
            }
        };

        let (weekly, n_week) = match spec.weekly_k {
            Some(kw) => {
                let term = cyclic_basis(7.0, kw)?;
                let pw = term.ncol();
                let mut design = DMatrix::zeros(n, pw);
                for i in 0..n {
                    let d = series.weekday(i) as usize;
                    design.set_row(i, &term.design.row(d - 1));
                }
                penalties.push(PenaltyBlock {
                    offset: n_inc,
                    rank: psd_rank(&term.penalties[0], 1e-9),
                    components: term.penalties.clone(),
                });
                (Some(design), pw)
            }
            None => (None, 0),
        };

        Ok(Self {
            kind: spec.kind,
            y: series.deaths.clone(),
            delay,
            incidence,
            weekly,
            penalties,
            theta: spec.theta,
            time_term,
            grid_days,
            n_inc,
            n_week,
            start: series.start,
            init_switch,
        })
    }

    pub fn n_days(&self) -> usize {
        self.y.len()
    }

    pub fn n_coef(&self) -> usize {
        self.n_inc + self.n_week
    }

    /// Number of coefficients driving the incidence.
    pub fn n_incidence_coef(&self) -> usize {
        self.n_inc
    }

    pub fn observations(&self) -> &[f64] {
        &self.y
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn delay(&self) -> Option<&DelayMatrix> {
        self.delay.as_ref()
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn n_smoothing_params(&self) -> usize {
        self.penalties.iter().map(|p| p.components.len()).sum()
    }

    /// `S_lambda` over the full coefficient vector.
    pub fn total_penalty(&self, lambda: &[f64]) -> DMatrix<f64> {
        let p = self.n_coef();
        let mut s = DMatrix::zeros(p, p);
        let mut idx = 0;
        for block in &self.penalties {
            let m = block.size();
            for c in &block.components {
                let mut view = s.view_mut((block.offset, block.offset), (m, m));
                view += c * lambda[idx];
                idx += 1;
            }
        }
        s
    }

    /// Each smoothing parameter's penalty embedded in the full coefficient space.
    pub fn penalty_components(&self) -> Vec<DMatrix<f64>> {
        let p = self.n_coef();
        let mut out = Vec::new();
        for block in &self.penalties {
            let m = block.size();
            for c in &block.components {
                let mut s = DMatrix::zeros(p, p);
                s.view_mut((block.offset, block.offset), (m, m)).copy_from(c);
                out.push(s);
            }
        }
        out
    }

    fn weekly_effect(&self, beta: &DVector<f64>) -> Vec<f64> {
        match &self.weekly {
            Some(xw) => (xw * beta.rows(self.n_inc, self.n_week)).iter().cloned().collect(),
            None => vec![0.0; self.n_days()],
        }
    }

    fn apply_delay(&self, fc: &[f64]) -> Vec<f64> {
        match &self.delay {
            Some(b) => b.apply(fc),
            None => fc.to_vec(),
        }
    }

    fn apply_delay_transpose(&self, w: &[f64]) -> Vec<f64> {
        match &self.delay {
            Some(b) => b.apply_transpose(w),
            None => w.to_vec(),
        }
    }

    /// Fatal incidence (or death rate for the basic model) at `beta`.
    pub fn incidence(&self, beta: &DVector<f64>) -> Vec<f64> {
        let b = beta.rows(0, self.n_inc);
        match &self.incidence {
            IncidenceMap::LogSpline { design } => (design * b).iter().map(|e| e.exp()).collect(),
            IncidenceMap::Renewal(r) => r.infections(&b.clone_owned()).0.iter().map(|c| c * r.ifr).collect(),
        }
    }

    /// `R_t` of the renewal model on the incidence grid.
    pub fn reproduction_number(&self, beta: &DVector<f64>) -> Option<Vec<f64>> {
        match &self.incidence {
            IncidenceMap::Renewal(r) => {
                let b = beta.rows(1, self.n_inc - 1);
                Some((&r.design * b).iter().map(|e| e.exp()).collect())
            }
            _ => None,
        }
    }

    pub fn predict(&self, beta: &DVector<f64>) -> LinkState {
        let fc = self.incidence(beta);
        let delta = self.apply_delay(&fc);
        let weekly = self.weekly_effect(beta);
        let mu = delta.iter().zip(&weekly).map(|(d, w)| d.max(f64::MIN_POSITIVE) * w.exp()).collect();
        LinkState { fc, delta, mu, weekly }
    }

    /// Log likelihood at `beta`; minus infinity where the renewal epidemic
    /// would exhaust the susceptible population.
    pub fn log_likelihood(&self, beta: &DVector<f64>) -> f64 {
        if let IncidenceMap::Renewal(r) = &self.incidence {
            if r.infections(&beta.rows(0, self.n_inc).clone_owned()).1 {
                return f64::NEG_INFINITY;
            }
        }
        let state = self.predict(beta);
        let v: f64 = self.y.iter().zip(&state.mu).map(|(&y, &m)| nb_log_likelihood(y, m, self.theta)).sum();
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Total deviance at `beta`.
    pub fn deviance(&self, beta: &DVector<f64>) -> f64 {
        let state = self.predict(beta);
        deviance_of(&self.y, &state.mu, self.theta)
    }

    pub fn penalized_log_likelihood(&self, beta: &DVector<f64>, lambda: &[f64]) -> f64 {
        let s = self.total_penalty(lambda);
        self.log_likelihood(beta) - 0.5 * beta.dot(&(&s * beta))
    }

    fn incidence_jet(&self, beta: &DVector<f64>) -> IncidenceJet {
        let b = beta.rows(0, self.n_inc).clone_owned();
        match &self.incidence {
            IncidenceMap::LogSpline { design } => {
                let fc: Vec<f64> = (design * &b).iter().map(|e| e.exp()).collect();
                let mut jac = design.clone();
                for (i, f) in fc.iter().enumerate() {
                    jac.row_mut(i).scale_mut(*f);
                }
                IncidenceJet { fc, jac, second: Vec::new() }
            }
            IncidenceMap::Renewal(r) => {
                let (c, jac, second) = r.infections_with_derivatives(&b);
                IncidenceJet {
                    fc: c.iter().map(|v| v * r.ifr).collect(),
                    jac: jac * r.ifr,
                    second: second.into_iter().map(|m| m * r.ifr).collect(),
                }
            }
        }
    }

    /// Log likelihood with its exact gradient and Hessian.
    pub fn log_likelihood_derivatives(&self, beta: &DVector<f64>) -> Objective {
        let n = self.n_days();
        let (pf, pw) = (self.n_inc, self.n_week);
        let jet = self.incidence_jet(beta);
        let delta = self.apply_delay(&jet.fc);
        let weekly = self.weekly_effect(beta);
        let e: Vec<f64> = weekly.iter().map(|w| w.exp()).collect();
        let mu: Vec<f64> = delta.iter().zip(&e).map(|(d, e)| d.max(f64::MIN_POSITIVE) * e).collect();

        let mut value = 0.0;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            value += nb_log_likelihood(self.y[i], mu[i], self.theta);
            let (ai, bi) = nb_mu_derivatives(self.y[i], mu[i], self.theta);
            a[i] = ai;
            b[i] = bi;
        }

        // B J: derivative of delta in the incidence coefficients
        let bj = match &self.delay {
            Some(d) => d.apply_matrix(&jet.jac),
            None => jet.jac.clone(),
        };
        let p = pf + pw;
        let mut gradient = DVector::zeros(p);
        let mut hessian = DMatrix::zeros(p, p);

        let ae: Vec<f64> = (0..n).map(|i| a[i] * e[i]).collect();
        let v = self.apply_delay_transpose(&ae);
        gradient.rows_mut(0, pf).copy_from(&(jet.jac.transpose() * DVector::from_vec(v.clone())));

        let mut w_ff = bj.clone();
        for i in 0..n {
            w_ff.row_mut(i).scale_mut(b[i] * e[i] * e[i]);
        }
        let mut hff = bj.transpose() * w_ff;
        match &self.incidence {
            IncidenceMap::LogSpline { design } => {
                let mut scaled = design.clone();
                for l in 0..n {
                    scaled.row_mut(l).scale_mut(v[l] * jet.fc[l]);
                }
                hff += design.transpose() * scaled;
            }
            IncidenceMap::Renewal(_) => {
                for (l, m) in jet.second.iter().enumerate() {
                    if v[l] != 0.0 {
                        hff += m * v[l];
                    }
                }
            }
        }
        hessian.view_mut((0, 0), (pf, pf)).copy_from(&hff);

        if let Some(xw) = &self.weekly {
            let amu = DVector::from_iterator(n, (0..n).map(|i| a[i] * mu[i]));
            gradient.rows_mut(pf, pw).copy_from(&(xw.transpose() * amu));
            let mut scaled_w = xw.clone();
            for i in 0..n {
                scaled_w.row_mut(i).scale_mut(b[i] * mu[i] * mu[i] + a[i] * mu[i]);
            }
            let hww = xw.transpose() * scaled_w;
            let mut scaled_f = xw.clone();
            for i in 0..n {
                scaled_f.row_mut(i).scale_mut(b[i] * e[i] * mu[i] + a[i] * e[i]);
            }
            let hfw = bj.transpose() * scaled_f;
            hessian.view_mut((pf, pf), (pw, pw)).copy_from(&hww);
            hessian.view_mut((0, pf), (pf, pw)).copy_from(&hfw);
            hessian.view_mut((pf, 0), (pw, pf)).copy_from(&hfw.transpose());
        }
        if !value.is_finite() {
            value = f64::NEG_INFINITY;
        }
        Objective { value, gradient, hessian }
    }

    /// Penalized log likelihood `l(beta) - beta' S beta / 2` with derivatives.
    pub fn penalized_objective(&self, beta: &DVector<f64>, lambda: &[f64]) -> Result<Objective> {
        if lambda.len() != self.n_smoothing_params() {
            return Err(Error::Dimension(format!(
                "expected {} smoothing parameters, got {}",
                self.n_smoothing_params(),
                lambda.len()
            )));
        }
        if lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Input("smoothing parameters must be nonnegative".into()));
        }
        let s = self.total_penalty(lambda);
        let mut obj = self.log_likelihood_derivatives(beta);
        let sb = &s * beta;
        obj.value -= 0.5 * beta.dot(&sb);
        obj.gradient -= sb;
        obj.hessian -= s;
        Ok(obj)
    }

    /// Median of the delay kernel in days, zero without a delay.
    fn median_lag(&self) -> usize {
        self.delay.as_ref().map_or(0, |d| {
            let k = d.kernel();
            let total: f64 = k.iter().sum();
            let mut acc = 0.0;
            k.iter()
                .position(|v| {
                    acc += v;
                    acc >= 0.5 * total
                })
                .unwrap_or(0)
                + 1
        })
    }

    /// Starting coefficients for fitting.
    pub fn initial_beta(&self) -> DVector<f64> {
        let n = self.n_days();
        let p = self.n_coef();
        let mut beta = DVector::zeros(p);
        match &self.incidence {
            IncidenceMap::LogSpline { design } => {
                // target: deaths shifted back by the delay median, lightly smoothed
                let lag = self.median_lag();
                let smooth = moving_average(&self.y, 7);
                let target: Vec<f64> = (0..n)
                    .map(|j| {
                        let src = (j + lag).min(n - 1);
                        (smooth[src] + 0.5).ln()
                    })
                    .collect();
                let coef = ridge_least_squares(design, &target, &self.penalties[0].components, 1e-3);
                beta.rows_mut(0, self.n_inc).copy_from(&coef);
            }
            IncidenceMap::Renewal(r) => {
                // without a given date, R falls below 1 at the smoothed death
                // peak moved back by the delay median
                let switch = self.init_switch.unwrap_or_else(|| {
                    let peak = crate::inference::argmax_first(&moving_average(&self.y, 7));
                    peak.saturating_sub(self.median_lag()).clamp(1, n - 1)
                });
                let target: Vec<f64> = (0..n).map(|t| if t < switch { 3f64.ln() } else { 0.7f64.ln() }).collect();
                let spline_cols = self.time_term.ncol();
                let spline = r.design.columns(0, spline_cols).clone_owned();
                let coef = ridge_least_squares(&spline, &target, &self.penalties[0].components, 1e-3);
                beta.rows_mut(1, spline_cols).copy_from(&coef);
                let fc = self.incidence(&beta);
                let pred: f64 = self.apply_delay(&fc).iter().sum();
                let obs: f64 = self.y.iter().sum::<f64>().max(1.0);
                beta[0] = (obs / pred.max(f64::MIN_POSITIVE)).ln();
            }
        }
        beta
    }
}

fn grid_index(grid_days: &[i64], day: i64) -> Result<usize> {
    grid_days
        .iter()
        .position(|&d| d == day)
        .ok_or_else(|| Error::Input(format!("day {day} is outside the model grid")))
}

pub fn deviance_of(y: &[f64], mu: &[f64], theta: f64) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| nb_deviance(y, m.max(f64::MIN_POSITIVE), theta).map(|d| d.value).unwrap_or(f64::INFINITY))
        .sum()
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let h = width / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(n);
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn ridge_least_squares(x: &DMatrix<f64>, target: &[f64], penalties: &[DMatrix<f64>], lambda: f64) -> DVector<f64> {
    let mut a = x.transpose() * x;
    let scale = a.diagonal().max().max(1e-12);
    for s in penalties {
        let ss = s.diagonal().max().max(1e-12);
        a += s * (lambda * scale / ss);
    }
    for i in 0..a.nrows() {
        a[(i, i)] += 1e-10 * scale;
    }
    let rhs = x.transpose() * DVector::from_column_slice(target);
    a.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(x.ncols()))
}

impl Renewal {
    fn log_r(&self, b: &DVector<f64>) -> Vec<f64> {
        let rows = self.design.nrows();
        let coef = b.rows(1, b.len() - 1);
        (0..rows).map(|t| self.design.row(t).dot(&coef.transpose())).collect()
    }

    /// Infections `c_t` for coefficients `(log c_1, beta_R)`, and whether the
    /// susceptible damping hit zero.
    fn infections(&self, b: &DVector<f64>) -> (Vec<f64>, bool) {
        let t_len = self.design.nrows();
        let log_r = self.log_r(b);
        let mut c = vec![0.0; t_len];
        c[0] = b[0].exp();
        let mut cum = c[0];
        let mut clamped = false;
        for t in 1..t_len {
            let mut damping = 1.0 - cum / self.population;
            if damping < 0.0 {
                damping = 0.0;
                clamped = true;
            }
            let a: f64 = (1..=t.min(self.generation.len())).map(|j| c[t - j] * self.generation[j - 1]).sum();
            c[t] = damping * log_r[t].exp() * a;
            cum += c[t];
        }
        if clamped {
            log::debug!("cumulative infections exceeded the susceptible population");
        }
        (c, clamped)
    }

    /// Infections with first and second derivatives in all coefficients.
    fn infections_with_derivatives(&self, b: &DVector<f64>) -> (Vec<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
        let t_len = self.design.nrows();
        let q = b.len();
        let log_r = self.log_r(b);
        let mut c = vec![0.0; t_len];
        let mut dc = DMatrix::zeros(t_len, q);
        let mut d2c: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);

        c[0] = b[0].exp();
        dc[(0, 0)] = c[0];
        let mut first = DMatrix::zeros(q, q);
        first[(0, 0)] = c[0];
        d2c.push(first);

        let mut cum = c[0];
        let mut dcum = DVector::zeros(q);
        dcum[0] = c[0];
        let mut d2cum = d2c[0].clone();
        let mut r_grad = DVector::zeros(q);
        for t in 1..t_len {
            let raw_damping = 1.0 - cum / self.population;
            let active = raw_damping > 0.0;
            let damping = raw_damping.max(0.0);
            let (d_damp, d2_damp) = if active {
                (-&dcum / self.population, -&d2cum / self.population)
            } else {
                (DVector::zeros(q), DMatrix::zeros(q, q))
            };

            let mut a = 0.0;
            let mut da = DVector::zeros(q);
            let mut d2a = DMatrix::zeros(q, q);
            for j in 1..=t.min(self.generation.len()) {
                let g = self.generation[j - 1];
                a += g * c[t - j];
                da += dc.row(t - j).transpose() * g;
                d2a += &d2c[t - j] * g;
            }
            let p = damping * a;
            let dp = &d_damp * a + &da * damping;
            let d2p = &d2_damp * a + &d_damp * da.transpose() + &da * d_damp.transpose() + &d2a * damping;

            for k in 1..q {
                r_grad[k] = self.design[(t, k - 1)];
            }
            let rt = log_r[t].exp();
            c[t] = rt * p;
            let d_row = (&r_grad * p + &dp) * rt;
            dc.row_mut(t).copy_from(&d_row.transpose());
            let d2 = (&r_grad * r_grad.transpose() * p + &r_grad * dp.transpose() + &dp * r_grad.transpose() + d2p) * rt;

            cum += c[t];
            dcum += &d_row;
            d2cum += &d2;
            d2c.push(d2);
        }
        (c, dc, d2c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::durations::incubation_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn test_series(n: usize) -> DeathSeries {
        let deaths: Vec<u64> = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                (200.0 * (-(t - 0.45).powi(2) / 0.04).exp() + 3.0 + (i % 3) as f64).round() as u64
            })
            .collect();
        DeathSeries::new(date(2020, 3, 2), deaths).unwrap().with_anchor("lockdown", date(2020, 3, 23))
    }

    fn test_dist() -> DurationDist {
        DurationDist::lognormal(3.19, 0.44).unwrap()
    }

    fn small_model(kind: ModelKind, n: usize, k: usize) -> Model {
        let mut spec = ModelSpec::new(kind);
        spec.k = k;
        spec.theta = 5.0;
        Model::build(&spec, &test_series(n), Some(&test_dist())).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn deviance_examples() {
        let d = nb_deviance(4.0, 4.0, 3.0).unwrap();
        assert!(d.d1.abs() < 1e-15);
        let d = nb_deviance(0.0, 1.0, 2.0).unwrap();
        assert!((d.value - 2.0 * (0.0 - 2.0 * (2.0f64 / 3.0).ln())).abs() < 1e-14);
        let (y, mu, th) = (7.0, 4.2, 3.1);
        let h = 1e-5;
        let f = |m: f64| nb_deviance(y, m, th).unwrap().value;
        let fd1 = (f(mu + h) - f(mu - h)) / (2.0 * h);
        let d = nb_deviance(y, mu, th).unwrap();
        assert!(rel_err(d.d1, fd1) < 1e-7, "{} {}", d.d1, fd1);
        let g = |m: f64| nb_deviance(y, m, th).unwrap().d1;
        assert!(rel_err(d.d2, (g(mu + h) - g(mu - h)) / (2.0 * h)) < 1e-7);
        assert!(nb_deviance(1.0, 0.0, 1.0).is_err());
        assert!(nb_deviance(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn deviance_matches_log_likelihood_difference() {
        for (y, mu, th) in [(0.0, 2.0, 1.5), (5.0, 3.0, 10.0), (40.0, 55.0, 7.0)] {
            let saturated = nb_log_likelihood(y, f64::max(y, 1e-300), th);
            let d = nb_deviance(y, mu, th).unwrap().value;
            assert!((d - 2.0 * (saturated - nb_log_likelihood(y, mu, th))).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_interval_mass_and_mean() {
        let g = generation_interval();
        assert_eq!(g.len(), 60);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        let shape = 6.5 * 0.62f64.powi(2);
        let scale = 0.62f64.powi(-2);
        assert!((shape * scale - 6.5).abs() < 1e-12);
    }

    #[test]
    fn basic_zero_coefficients_give_unit_mean() {
        let m = small_model(ModelKind::Basic, 40, 8);
        let mu = m.predict(&DVector::zeros(m.n_coef())).mu;
        assert!(mu.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn identity_delay_reduces_incidence_to_basic() {
        let series = test_series(50);
        let mut spec = ModelSpec::new(ModelKind::Basic);
        spec.k = 8;
        let basic = Model::build(&spec, &series, None).unwrap();
        let beta = DVector::from_fn(basic.n_coef(), |i, _| 0.1 * (i as f64).sin());
        let st = basic.predict(&beta);
        for i in 0..50 {
            assert!((st.delta[i] - st.fc[i]).abs() < 1e-12);
        }
    }

    fn check_derivatives(m: &Model, seed: u64, points: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda: Vec<f64> = (0..m.n_smoothing_params()).map(|_| rng.random_range(0.1..10.0)).collect();
        let base = m.initial_beta();
        for _ in 0..points {
            let beta = DVector::from_fn(m.n_coef(), |i, _| base[i] + rng.random_range(-0.3..0.3));
            let obj = m.penalized_objective(&beta, &lambda).unwrap();
            let h = 1e-5;
            for j in 0..m.n_coef() {
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[j] += h;
                bm[j] -= h;
                let op = m.penalized_objective(&bp, &lambda).unwrap();
                let om = m.penalized_objective(&bm, &lambda).unwrap();
                let g = (op.value - om.value) / (2.0 * h);
                let scale = obj.gradient.amax().max(1.0);
                assert!((g - obj.gradient[j]).abs() / scale < 1e-5, "grad {j}: {g} vs {}", obj.gradient[j]);
                let hcol = (&op.gradient - &om.gradient) / (2.0 * h);
                let hscale = obj.hessian.amax();
                for i in 0..m.n_coef() {
                    assert!(
                        (hcol[i] - obj.hessian[(i, j)]).abs() / hscale < 1e-5,
                        "hess ({i},{j}): {} vs {}",
                        hcol[i],
                        obj.hessian[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        check_derivatives(&small_model(ModelKind::Basic, 60, 8), 1, 3);
        check_derivatives(&small_model(ModelKind::Incidence, 60, 8), 2, 3);
        check_derivatives(&small_model(ModelKind::Renewal, 60, 8), 3, 3);
    }

    #[test]
    fn renewal_step_variant_derivatives() {
        let mut spec = ModelSpec::new(ModelKind::Renewal);
        spec.k = 8;
        spec.renewal.step_day = Some(21);
        let m = Model::build(&spec, &test_series(60), Some(&test_dist())).unwrap();
        assert_eq!(m.n_coef(), 1 + 8 + 1 + 6);
        check_derivatives(&m, 4, 2);
    }

    #[test]
    fn constant_incidence_gives_constant_deaths() {
        let series = DeathSeries::new(date(2020, 1, 1), vec![10; 200]).unwrap();
        let mut spec = ModelSpec::new(ModelKind::Incidence);
        spec.k = 10;
        spec.weekly_k = None;
        let m = Model::build(&spec, &series, Some(&test_dist())).unwrap();
        // B-spline partition of unity: equal coefficients give constant f_c
        let beta = DVector::from_element(m.n_coef(), 100f64.ln());
        let st = m.predict(&beta);
        assert!(st.fc.iter().all(|&f| (f - 100.0).abs() < 1e-9));
        for &mu in &st.mu[90..] {
            assert!((mu - 100.0).abs() < 1.0);
        }
    }

    #[test]
    fn shifting_incidence_shifts_deaths() {
        let m = small_model(ModelKind::Incidence, 80, 10);
        let d = m.delay().unwrap();
        let fc: Vec<f64> = (0..80).map(|i| 1.0 + (i as f64 / 9.0).sin().powi(2)).collect();
        let mut shifted = vec![0.0; 80];
        shifted[1..].copy_from_slice(&fc[..79]);
        let a = d.apply(&fc);
        let b = d.apply(&shifted);
        for i in 1..80 {
            assert!((b[i] - a[i - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn renewal_critical_equilibrium() {
        let n = 150;
        let series = DeathSeries::new(date(2020, 1, 1), vec![1; n]).unwrap();
        let mut spec = ModelSpec::new(ModelKind::Renewal);
        spec.k = 8;
        spec.weekly_k = None;
        spec.renewal.population = 1e15;
        let m = Model::build(&spec, &series, Some(&incubation_model())).unwrap();
        let mut beta = DVector::zeros(m.n_coef());
        beta[0] = 10f64.ln();
        let fc = m.incidence(&beta);
        let last = fc[n - 1];
        for &v in &fc[60..] {
            assert!((v - last).abs() / last < 0.01);
        }
    }

    #[test]
    fn renewal_ifr_only_matters_through_damping() {
        let n = 80;
        let series = test_series(n);
        let mut base_mu = None;
        for ifr in [0.003, 0.006, 0.012] {
            let mut spec = ModelSpec::new(ModelKind::Renewal);
            spec.k = 8;
            spec.renewal.population = 1e12;
            spec.renewal.ifr = ifr;
            let m = Model::build(&spec, &series, Some(&test_dist())).unwrap();
            let mut beta = m.initial_beta();
            // hold the number of infections fixed
            beta[0] = 5.0;
            let fc = m.incidence(&beta);
            let unscaled: Vec<f64> = fc.iter().map(|f| f / ifr).collect();
            let mu: Vec<f64> = m.predict(&beta).mu.iter().map(|v| v / ifr).collect();
            match &base_mu {
                None => base_mu = Some((unscaled, mu)),
                Some((c0, mu0)) => {
                    for i in 0..n {
                        assert!(rel_err(unscaled[i], c0[i]) < 1e-6);
                        assert!(rel_err(mu[i], mu0[i]) < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn damping_reduces_infections() {
        let n = 100;
        let series = test_series(n);
        let mut spec = ModelSpec::new(ModelKind::Renewal);
        spec.k = 8;
        spec.renewal.population = 1e12;
        let free = Model::build(&spec, &series, Some(&test_dist())).unwrap();
        spec.renewal.population = 5e4;
        let damped = Model::build(&spec, &series, Some(&test_dist())).unwrap();
        let mut beta = DVector::zeros(free.n_coef());
        beta[0] = 3.0;
        for j in 1..9 {
            beta[j] = 0.5;
        }
        let a = free.incidence(&beta);
        let b = damped.incidence(&beta);
        assert!(a.iter().zip(&b).all(|(x, y)| y <= &(x * (1.0 + 1e-12))));
        assert!(b[n - 1] < a[n - 1]);
    }

    #[test]
    fn penalty_layout() {
        let m = small_model(ModelKind::Incidence, 60, 8);
        assert_eq!(m.n_smoothing_params(), 2);
        assert_eq!(m.penalties[0].rank, 6);
        assert_eq!(m.penalties[1].offset, 8);
        let s = m.total_penalty(&[1.0, 0.0]);
        assert!(s.view((8, 8), (6, 6)).iter().all(|&v| v == 0.0));
        assert!(m.penalized_objective(&m.initial_beta(), &[1.0]).is_err());
        assert!(m.penalized_objective(&m.initial_beta(), &[1.0, -1.0]).is_err());
    }

    #[test]
    fn weekday_convention() {
        // 2 March 2020 was a Monday
        let s = test_series(10);
        assert_eq!(s.weekday(0), 1);
        assert_eq!(s.weekday(6), 7);
        assert_eq!(s.day_of(date(2020, 3, 23)), 21);
    }
}
