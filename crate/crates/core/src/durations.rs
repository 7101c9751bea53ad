//! Fatal disease duration distributions.
//!
//! Onset-to-death models from the published studies are pooled by a
//! simulate-and-refit meta-analysis, shifted to infection-to-death by adding
//! the incubation period, and replicated to represent their uncertainty. The
//! resulting lognormal densities are discretised into the lower-triangular
//! delay matrix mapping daily fatal infections to expected daily deaths.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF};
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::optim::{bisect, nelder_mead};

/// Monte-Carlo sample size for lognormal fits to sums of durations.
pub const MC_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    LogNormal,
    Gamma,
}

/// A parametric duration distribution in days.
///
/// Lognormal uses `(mu, sigma)` on the log scale; gamma uses `(shape, scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationDist {
    pub family: Family,
    pub p1: f64,
    pub p2: f64,
}

impl DurationDist {
    pub fn lognormal(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() {
            return Err(Error::Input(format!("invalid lognormal ({mu}, {sigma})")));
        }
        Ok(Self { family: Family::LogNormal, p1: mu, p2: sigma })
    }

    pub fn gamma(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0) {
            return Err(Error::Input(format!("invalid gamma ({shape}, {scale})")));
        }
        Ok(Self { family: Family::Gamma, p1: shape, p2: scale })
    }

    /// Lognormal with the given arithmetic mean and standard deviation.
    pub fn lognormal_from_moments(mean: f64, sd: f64) -> Result<Self> {
        let (mu, sigma) = lognormal_params(mean, sd)?;
        Self::lognormal(mu, sigma)
    }

    /// Gamma with the given mean and standard deviation.
    pub fn gamma_from_moments(mean: f64, sd: f64) -> Result<Self> {
        let (shape, scale) = gamma_params(mean, sd)?;
        Self::gamma(shape, scale)
    }

    pub fn mean(&self) -> f64 {
        match self.family {
            Family::LogNormal => (self.p1 + 0.5 * self.p2 * self.p2).exp(),
            Family::Gamma => self.p1 * self.p2,
        }
    }

    pub fn sd(&self) -> f64 {
        match self.family {
            Family::LogNormal => self.mean() * ((self.p2 * self.p2).exp() - 1.0).sqrt(),
            Family::Gamma => self.p1.sqrt() * self.p2,
        }
    }

    pub fn median(&self) -> f64 {
        match self.family {
            Family::LogNormal => self.p1.exp(),
            Family::Gamma => self.as_statrs_gamma().inverse_cdf(0.5),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self.family {
            Family::LogNormal => self.as_statrs_lognormal().pdf(x),
            Family::Gamma => self.as_statrs_gamma().pdf(x),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self.family {
            Family::LogNormal => self.as_statrs_lognormal().cdf(x),
            Family::Gamma => self.as_statrs_gamma().cdf(x),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match self.family {
            Family::LogNormal => self.as_statrs_lognormal().inverse_cdf(p),
            Family::Gamma => self.as_statrs_gamma().inverse_cdf(p),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            Family::LogNormal => LogNormal::new(self.p1, self.p2).expect("validated").sample(rng),
            Family::Gamma => Gamma::new(self.p1, self.p2).expect("validated").sample(rng),
        }
    }

    /// Mean and variance of the log duration.
    pub fn log_moments(&self) -> (f64, f64) {
        match self.family {
            Family::LogNormal => (self.p1, self.p2 * self.p2),
            Family::Gamma => (digamma(self.p1) + self.p2.ln(), trigamma(self.p1)),
        }
    }

    fn as_statrs_lognormal(&self) -> statrs::distribution::LogNormal {
        statrs::distribution::LogNormal::new(self.p1, self.p2).expect("validated")
    }

    fn as_statrs_gamma(&self) -> statrs::distribution::Gamma {
        statrs::distribution::Gamma::new(self.p1, 1.0 / self.p2).expect("validated")
    }
}

/// Log-scale `(mu, sigma)` of a lognormal with arithmetic `mean` and `sd`.
pub fn lognormal_params(mean: f64, sd: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0 && sd > 0.0) {
        return Err(Error::Input(format!("mean and sd must be positive, got ({mean}, {sd})")));
    }
    let s2 = (1.0 + (sd / mean).powi(2)).ln();
    Ok((mean.ln() - 0.5 * s2, s2.sqrt()))
}

/// `(shape, scale)` of a gamma with the given `mean` and `sd`.
pub fn gamma_params(mean: f64, sd: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0 && sd > 0.0) {
        return Err(Error::Input(format!("mean and sd must be positive, got ({mean}, {sd})")));
    }
    Ok(((mean / sd).powi(2), sd * sd / mean))
}

fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// A published onset-to-death model with the sample size it was fitted to.
#[derive(Debug, Clone, Copy)]
pub struct StudyModel {
    pub name: &'static str,
    pub dist: DurationDist,
    pub n: usize,
}

/// Onset-to-death models of Verity et al., Wu et al. and Linton et al.
pub fn published_models() -> [StudyModel; 3] {
    [
        StudyModel {
            name: "verity",
            dist: DurationDist::gamma_from_moments(17.8, 8.44).expect("constant"),
            n: 24,
        },
        StudyModel {
            name: "wu",
            dist: DurationDist::gamma_from_moments(20.0, 10.0).expect("constant"),
            n: 41,
        },
        StudyModel {
            name: "linton",
            dist: DurationDist::lognormal_from_moments(20.2, 11.6).expect("constant"),
            n: 34,
        },
    ]
}

/// Infection-to-onset (incubation) lognormal, log-scale mean 1.63 and sd 0.5.
pub fn incubation_model() -> DurationDist {
    DurationDist::lognormal(1.63, 0.50).expect("constant")
}

/// Maximum likelihood lognormal fit to positive samples.
pub fn fit_lognormal_ml(samples: &[f64]) -> Result<DurationDist> {
    if samples.len() < 2 {
        return Err(Error::Input("need at least two samples".into()));
    }
    if samples.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Domain("lognormal fit needs positive samples".into()));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    let var = samples.iter().map(|x| (x.ln() - mu).powi(2)).sum::<f64>() / n;
    DurationDist::lognormal(mu, var.sqrt())
}

fn positive_draw<R: Rng + ?Sized>(dist: &DurationDist, rng: &mut R) -> f64 {
    loop {
        let x = dist.sample(rng);
        if x > 0.0 && x.is_finite() {
            return x;
        }
    }
}

/// Simulate each study's sample size from its model and fit a lognormal to
/// the pooled sample.
pub fn combine_onset_to_death<R: Rng + ?Sized>(rng: &mut R) -> DurationDist {
    let mut pooled = Vec::with_capacity(99);
    for m in published_models() {
        for _ in 0..m.n {
            pooled.push(positive_draw(&m.dist, rng));
        }
    }
    fit_lognormal_ml(&pooled).expect("pooled sample is positive")
}

/// Lognormal minimising KL divergence to the law of the sum of independent
/// durations, via ML on a Monte-Carlo sample of size `n`.
pub fn fit_sum_lognormal<R: Rng + ?Sized>(
    parts: &[&dyn Fn(&mut R) -> f64],
    n: usize,
    rng: &mut R,
) -> DurationDist {
    let sample: Vec<f64> = (0..n).map(|_| parts.iter().map(|p| p(rng)).sum::<f64>()).collect();
    fit_lognormal_ml(&sample).expect("sums of positive durations are positive")
}

/// Infection-to-death lognormal from an onset-to-death law and an
/// independent incubation law.
pub fn convolve_to_infection<R: Rng + ?Sized>(
    onset_to_death: &DurationDist,
    incubation: &DurationDist,
    rng: &mut R,
) -> DurationDist {
    convolve_to_infection_n(onset_to_death, incubation, MC_SAMPLES, rng)
}

pub fn convolve_to_infection_n<R: Rng + ?Sized>(
    onset_to_death: &DurationDist,
    incubation: &DurationDist,
    n: usize,
    rng: &mut R,
) -> DurationDist {
    let a = |r: &mut R| positive_draw(onset_to_death, r);
    let b = |r: &mut R| positive_draw(incubation, r);
    fit_sum_lognormal(&[&a, &b], n, rng)
}

/// Replicate infection-to-death distributions plus a central one.
#[derive(Debug, Clone)]
pub struct DurationEnsemble {
    pub draws: Vec<DurationDist>,
    pub mean_dist: DurationDist,
}

impl DurationEnsemble {
    /// An ensemble holding a single known distribution.
    pub fn single(dist: DurationDist) -> Self {
        Self { draws: vec![dist], mean_dist: dist }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Deterministic lognormal ML limit of the pooled onset-to-death sample:
/// log-scale moments of the study mixture weighted by sample size.
pub fn meta_onset_to_death_limit() -> DurationDist {
    let models = published_models();
    let total: f64 = models.iter().map(|m| m.n as f64).sum();
    let (mut m1, mut m2) = (0.0, 0.0);
    for m in &models {
        let w = m.n as f64 / total;
        let (mu, var) = m.dist.log_moments();
        m1 += w * mu;
        m2 += w * (var + mu * mu);
    }
    DurationDist::lognormal(m1, (m2 - m1 * m1).sqrt()).expect("positive variance")
}

/// `r` independent replicates of the meta-analysis followed by the incubation
/// convolution. Replicate `i` uses its own random stream derived from `seed`,
/// so the result does not depend on thread scheduling.
pub fn duration_ensemble(r: usize, seed: u64) -> Result<DurationEnsemble> {
    if r == 0 {
        return Err(Error::Input("ensemble size must be at least 1".into()));
    }
    let incubation = incubation_model();
    let draws: Vec<DurationDist> = (0..r)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::stream_rng(seed, i as u64);
            let o2d = combine_onset_to_death(&mut rng);
            convolve_to_infection(&o2d, &incubation, &mut rng)
        })
        .collect();
    let mut rng = crate::stream_rng(seed, u64::MAX);
    let mean_dist = convolve_to_infection_n(&meta_onset_to_death_limit(), &incubation, 10 * MC_SAMPLES, &mut rng);
    Ok(DurationEnsemble { draws, mean_dist })
}

/// Delay matrix `B[i][j] = pi(i - j + 1)` for `i >= j`: column `j` holds the
/// death-day probabilities (midpoint rule) for infections one day before
/// death day `j`. Stored as its Toeplitz kernel.
#[derive(Debug, Clone)]
pub struct DelayMatrix {
    /// `kernel[l] = pi(l + 1)`.
    kernel: Vec<f64>,
}

impl DelayMatrix {
    pub fn n(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i < j {
            0.0
        } else {
            self.kernel[i - j]
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }

    /// `B f`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| (0..=i).map(|j| self.kernel[i - j] * f[j]).sum())
            .collect()
    }

    /// `B^T w`.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|j| (j..n).map(|i| self.kernel[i - j] * w[i]).sum())
            .collect()
    }

    /// `B M` for a matrix with `n` rows.
    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, m.ncols());
        for c in 0..m.ncols() {
            let col: Vec<f64> = m.column(c).iter().cloned().collect();
            let r = self.apply(&col);
            for i in 0..n {
                out[(i, c)] = r[i];
            }
        }
        out
    }
}

pub fn delay_matrix(dist: &DurationDist, n_days: usize) -> Result<DelayMatrix> {
    if n_days == 0 {
        return Err(Error::Input("delay matrix needs at least one day".into()));
    }
    Ok(DelayMatrix { kernel: (0..n_days).map(|l| dist.pdf((l + 1) as f64)).collect() })
}

/// Two-component mixture for onset-to-death day counts: a gamma component for
/// hospital acquired infections and a lognormal, with the longer mean, for
/// community acquired ones.
#[derive(Debug, Clone, Copy)]
pub struct MixtureFit {
    pub gamma: DurationDist,
    pub lognormal: DurationDist,
    /// Proportion of the lognormal (community) component.
    pub community: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ChessFit {
    pub mle: MixtureFit,
    /// Fit with the gamma proportion reduced until the profile log-likelihood
    /// is 4 below the maximum.
    pub constrained: MixtureFit,
}

/// Profile log-likelihood drop defining the constrained mixture fit.
pub const CHESS_PROFILE_DROP: f64 = 4.0;

fn bin_prob(dist: &DurationDist, day: u32) -> f64 {
    let lo = (day as f64 - 0.5).max(0.0);
    let hi = day as f64 + 0.5;
    dist.cdf(hi) - dist.cdf(lo)
}

fn mixture_from(z: &[f64], community: Option<f64>) -> Option<MixtureFit> {
    let (p, rest) = match community {
        Some(p) => (p, z),
        None => (1.0 / (1.0 + (-z[0]).exp()), &z[1..]),
    };
    let g_mean = rest[0].exp();
    let g_sd = rest[1].exp();
    let l_mean = g_mean + rest[2].exp();
    let l_sd = rest[3].exp();
    let gamma = DurationDist::gamma_from_moments(g_mean, g_sd).ok()?;
    let lognormal = DurationDist::lognormal_from_moments(l_mean, l_sd).ok()?;
    Some(MixtureFit { gamma, lognormal, community: p, loglik: f64::NEG_INFINITY })
}

fn mixture_loglik(hist: &[(u32, f64)], fit: &MixtureFit) -> f64 {
    hist.iter()
        .map(|&(d, c)| {
            let p = (1.0 - fit.community) * bin_prob(&fit.gamma, d) + fit.community * bin_prob(&fit.lognormal, d);
            c * p.max(1e-300).ln()
        })
        .sum()
}

/// Fit the onset-to-death mixture to a day-count histogram by maximum
/// likelihood, then reduce the gamma proportion until the profile
/// log-likelihood is [`CHESS_PROFILE_DROP`] below the maximum. Day `d` counts
/// durations in `[d - 1/2, d + 1/2)`.
pub fn fit_chess_mixture(histogram: &[(u32, u64)]) -> Result<ChessFit> {
    let hist: Vec<(u32, f64)> = histogram.iter().filter(|h| h.1 > 0).map(|&(d, c)| (d, c as f64)).collect();
    if hist.len() < 2 {
        return Err(Error::Input("histogram needs at least two distinct days".into()));
    }
    let total: f64 = hist.iter().map(|h| h.1).sum();
    let mean: f64 = hist.iter().map(|h| h.0 as f64 * h.1).sum::<f64>() / total;
    let sd = (hist.iter().map(|h| (h.0 as f64 - mean).powi(2) * h.1).sum::<f64>() / total).sqrt();

    let nll = |z: &[f64], fixed: Option<f64>| -> f64 {
        match mixture_from(z, fixed) {
            Some(f) => -mixture_loglik(&hist, &f),
            None => f64::INFINITY,
        }
    };
    let start = [0.85f64.ln() - 0.15f64.ln(), (0.2 * mean).max(1.0).ln(), (0.1 * mean).max(0.5).ln(), mean.ln(), sd.max(1.0).ln()];
    let mut best: Option<(Vec<f64>, f64)> = None;
    for g in [0.1, 0.2, 0.35] {
        let mut z0 = start.to_vec();
        z0[1] = (g * mean).max(0.5).ln();
        let (z, f) = nelder_mead(|z| nll(z, None), &z0, 0.3, 4000)?;
        if best.as_ref().map_or(true, |b| f < b.1) {
            best = Some((z, f));
        }
    }
    let (z_hat, nll_hat) = best.expect("at least one start");
    let mut mle = mixture_from(&z_hat, None).ok_or_else(|| Error::Domain("degenerate mixture".into()))?;
    mle.loglik = -nll_hat;

    let target = mle.loglik - CHESS_PROFILE_DROP;
    let profile = |p: f64, warm: &[f64]| -> Result<(Vec<f64>, f64)> {
        let (z, f) = nelder_mead(|z| nll(z, Some(p)), warm, 0.2, 3000)?;
        Ok((z, -f))
    };
    let warm: Vec<f64> = z_hat[1..].to_vec();
    let hi = 1.0 - 1e-6;
    let (z_hi, ll_hi) = profile(hi, &warm)?;
    let community = if ll_hi >= target {
        hi
    } else {
        let cell = std::cell::RefCell::new(warm.clone());
        bisect(
            |p| {
                let w = cell.borrow().clone();
                match profile(p, &w) {
                    Ok((z, ll)) => {
                        *cell.borrow_mut() = z;
                        ll - target
                    }
                    Err(_) => -1.0,
                }
            },
            mle.community,
            hi,
            1e-5,
        )
    };
    let _ = z_hi;
    let (z_c, ll_c) = profile(community, &warm)?;
    let mut constrained = mixture_from(&z_c, Some(community)).ok_or_else(|| Error::Domain("degenerate mixture".into()))?;
    constrained.loglik = ll_c;
    Ok(ChessFit { mle, constrained })
}

/// Outcome of combining the ISARIC hospitalisation-to-death function with the
/// onset-to-hospitalisation and incubation laws.
#[derive(Debug, Clone, Copy)]
pub struct IsaricResult {
    pub hosp_to_death: DurationDist,
    pub onset_to_death_mean: f64,
    pub onset_to_death_sd: f64,
    pub infection_to_death: DurationDist,
}

pub const ONSET_TO_HOSP_MEAN: f64 = 7.7;
pub const ONSET_TO_HOSP_SD: f64 = 6.1;

/// `table` holds `(day, probability)` pairs, probability of a duration in
/// `[day, day + 1)`. The lognormal fit minimises KL divergence to the table;
/// the infection-to-death law is the lognormal fitted to the three-way sum
/// of a duration drawn from the table, onset-to-hospitalisation and
/// incubation.
pub fn isaric_infection_to_death<R: Rng + ?Sized>(table: &[(u32, f64)], rng: &mut R) -> Result<IsaricResult> {
    let total: f64 = table.iter().map(|t| t.1).sum();
    if (total - 1.0).abs() > 0.02 {
        return Err(Error::Input(format!("probability function sums to {total}, not 1")));
    }
    if table.iter().any(|t| t.1 < 0.0) {
        return Err(Error::Input("negative probability".into()));
    }
    let probs: Vec<(u32, f64)> = table.iter().map(|&(d, p)| (d, p / total)).collect();
    let kl = |z: &[f64]| -> f64 {
        let Ok(dist) = DurationDist::lognormal(z[0], z[1].exp()) else { return f64::INFINITY };
        -probs
            .iter()
            .map(|&(d, p)| {
                let q = dist.cdf(d as f64 + 1.0) - dist.cdf(d as f64);
                p * q.max(1e-300).ln()
            })
            .sum::<f64>()
    };
    let (z, _) = nelder_mead(kl, &[2.2, -0.3], 0.2, 4000)?;
    let hosp_to_death = DurationDist::lognormal(z[0], z[1].exp())?;
    let onset_to_death_mean = hosp_to_death.mean() + ONSET_TO_HOSP_MEAN;
    let onset_to_death_sd = (hosp_to_death.sd().powi(2) + ONSET_TO_HOSP_SD.powi(2)).sqrt();

    let o2h = DurationDist::lognormal_from_moments(ONSET_TO_HOSP_MEAN, ONSET_TO_HOSP_SD)?;
    let incubation = incubation_model();
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &(_, p) in &probs {
        acc += p;
        cumulative.push(acc);
    }
    let draw_table = |r: &mut R| -> f64 {
        let u: f64 = r.random::<f64>() * acc;
        let idx = cumulative.partition_point(|&c| c < u).min(probs.len() - 1);
        probs[idx].0 as f64 + r.random::<f64>()
    };
    let draw_o2h = |r: &mut R| positive_draw(&o2h, r);
    let draw_inc = |r: &mut R| positive_draw(&incubation, r);
    let infection_to_death = fit_sum_lognormal(&[&draw_table, &draw_o2h, &draw_inc], 2 * MC_SAMPLES, rng);
    Ok(IsaricResult { hosp_to_death, onset_to_death_mean, onset_to_death_sd, infection_to_death })
}

/// Read a two-column `day,value` table, skipping `#` comment lines.
pub fn read_day_table(path: &Path) -> Result<Vec<(u32, f64)>> {
    parse_day_table(std::fs::File::open(path)?)
}

pub fn parse_day_table<T: std::io::Read>(reader: T) -> Result<Vec<(u32, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 || rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let day: u32 = rec[0].parse().map_err(|_| Error::Input(format!("bad day '{}'", &rec[0])))?;
        let v: f64 = rec[1].parse().map_err(|_| Error::Input(format!("bad value '{}'", &rec[1])))?;
        out.push((day, v));
    }
    Ok(out)
}
