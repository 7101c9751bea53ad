//! Reproduction number from a fatal incidence path.
//!
//! Incidence is treated as the infection flow of an SEIR model, so solving
//! `E' = f - gamma E`, `I' = gamma E - delta I` from zero gives the infectious
//! pool and `R = f / (delta I)`. Any constant scaling of `f` cancels.

use crate::error::{Error, Result};
use crate::inference::Bands;

pub const RK4_STEP: f64 = 0.05;
/// `I` below this fraction of its maximum leaves `R` undefined.
pub const MASK_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeirParams {
    /// Mean days from infection to infectivity, `1 / gamma`.
    pub latent_days: f64,
    /// Mean days infectious, `1 / delta`.
    pub infectious_days: f64,
}

impl Default for SeirParams {
    fn default() -> Self {
        Self { latent_days: 3.0, infectious_days: 5.0 }
    }
}

impl SeirParams {
    pub fn new(latent_days: f64, infectious_days: f64) -> Result<Self> {
        if !(latent_days > 0.0 && infectious_days > 0.0) {
            return Err(Error::Input("SEIR durations must be positive".into()));
        }
        Ok(Self { latent_days, infectious_days })
    }

    pub fn gamma(&self) -> f64 {
        1.0 / self.latent_days
    }

    pub fn delta(&self) -> f64 {
        1.0 / self.infectious_days
    }

    /// Long-run `R` under exponential growth at rate `r` per day.
    pub fn growth_limit(&self, r: f64) -> f64 {
        (1.0 + r / self.gamma()) * (1.0 + r / self.delta())
    }
}

/// `E` and `I` at each whole day, starting from zero on day 0. Between days
/// `f` is interpolated geometrically, which is exact for exponential growth.
pub fn solve_exposed_infectious(fc: &[f64], params: &SeirParams, step: f64) -> (Vec<f64>, Vec<f64>) {
    let n = fc.len();
    let (g, d) = (params.gamma(), params.delta());
    let mut e_out = vec![0.0; n];
    let mut i_out = vec![0.0; n];
    let (mut e, mut i) = (0.0, 0.0);
    let sub = (1.0 / step).round().max(1.0) as usize;
    let h = 1.0 / sub as f64;
    let rhs = |f: f64, e: f64, i: f64| (f - g * e, g * e - d * i);
    for day in 1..n {
        let (f0, f1) = (fc[day - 1], fc[day]);
        // geometric interpolation between positive days, linear otherwise
        let interp = |u: f64| -> f64 {
            if f0 > 0.0 && f1 > 0.0 {
                f0 * (f1 / f0).powf(u)
            } else {
                f0 + (f1 - f0) * u
            }
        };
        for s in 0..sub {
            let t0 = s as f64 * h;
            let fa = interp(t0);
            let fm = interp(t0 + 0.5 * h);
            let fb = interp(t0 + h);
            let (k1e, k1i) = rhs(fa, e, i);
            let (k2e, k2i) = rhs(fm, e + 0.5 * h * k1e, i + 0.5 * h * k1i);
            let (k3e, k3i) = rhs(fm, e + 0.5 * h * k2e, i + 0.5 * h * k2i);
            let (k4e, k4i) = rhs(fb, e + h * k3e, i + h * k3i);
            e += h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
            i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
        }
        e_out[day] = e;
        i_out[day] = i;
    }
    (e_out, i_out)
}

/// Daily `R`; `None` where the infectious pool is still negligible.
pub fn r_from_incidence(fc: &[f64], params: &SeirParams) -> Result<Vec<Option<f64>>> {
    if fc.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::Input("incidence must be nonnegative and finite".into()));
    }
    // normalise so the result does not depend on the incidence scale
    let scale = fc.iter().cloned().fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Ok(vec![None; fc.len()]);
    }
    let unit: Vec<f64> = fc.iter().map(|f| f / scale).collect();
    let (_, i) = solve_exposed_infectious(&unit, params, RK4_STEP);
    let i_max = i.iter().cloned().fold(0.0f64, f64::max);
    Ok(unit
        .iter()
        .zip(&i)
        .map(|(&f, &iv)| (iv > MASK_FRACTION * i_max && iv > 0.0).then(|| f / (iv * params.delta())))
        .collect())
}

/// `R` paths over a grid of SEIR durations with their pointwise envelope.
#[derive(Debug, Clone)]
pub struct RSensitivity {
    pub central: Vec<Option<f64>>,
    pub paths: Vec<(SeirParams, Vec<Option<f64>>)>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

/// Evaluate `R` for `steps` evenly spaced values in each duration range (all
/// combinations, plus the central parameters) and take the pointwise
/// envelope.
pub fn r_sensitivity(
    fc: &[f64],
    central: &SeirParams,
    latent_range: (f64, f64),
    infectious_range: (f64, f64),
    steps: usize,
) -> Result<RSensitivity> {
    let grid = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if steps <= 1 || hi <= lo {
            vec![lo]
        } else {
            (0..steps).map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64).collect()
        }
    };
    let central_path = r_from_incidence(fc, central)?;
    let mut paths = vec![(*central, central_path.clone())];
    for l in grid(latent_range) {
        for d in grid(infectious_range) {
            let p = SeirParams::new(l, d)?;
            paths.push((p, r_from_incidence(fc, &p)?));
        }
    }
    let n = fc.len();
    let mut lower = vec![None; n];
    let mut upper = vec![None; n];
    for t in 0..n {
        let vals: Vec<f64> = paths.iter().filter_map(|(_, r)| r[t]).collect();
        if vals.len() == paths.len() {
            lower[t] = Some(vals.iter().cloned().fold(f64::INFINITY, f64::min));
            upper[t] = Some(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    Ok(RSensitivity { central: central_path, paths, lower, upper })
}

/// Pointwise `R` bands over posterior incidence paths. Masked days are NaN.
pub fn r_posterior(paths: &[Vec<f64>], params: &SeirParams) -> Result<Bands> {
    let r_paths = paths
        .iter()
        .map(|p| Ok(r_from_incidence(p, params)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(Bands::from_paths(&r_paths))
}
