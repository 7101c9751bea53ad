//! Spline bases with integrated squared second derivative penalties.
//!
//! Three flavours are provided: an ordinary cubic regression spline on a
//! (possibly time-dilated) day grid, a cyclic cubic spline for day-of-week
//! effects with a zero-mean constraint absorbed into the basis, and an adaptive
//! cubic spline whose wiggliness penalty is split into several locally
//! weighted components.
//!
//! All cubic bases are uniform-knot B-splines. Their penalties are assembled by
//! two point Gauss-Legendre quadrature on every interval between breakpoints,
//! which is exact because second derivatives are piecewise linear.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const GAUSS2: [(f64, f64); 2] = [(-0.577_350_269_189_625_8, 1.0), (0.577_350_269_189_625_8, 1.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothKind {
    Cubic,
    Cyclic,
    Adaptive,
}

#[derive(Debug, Clone)]
enum Basis {
    Cubic {
        knots_ext: Vec<f64>,
    },
    Cyclic {
        period: f64,
        k: usize,
        /// k x (k-1) matrix absorbing the zero-mean constraint.
        constraint: DMatrix<f64>,
    },
}

/// A spline basis evaluated on a grid, together with its penalty matrices.
#[derive(Debug, Clone)]
pub struct SmoothTerm {
    pub design: DMatrix<f64>,
    pub penalties: Vec<DMatrix<f64>>,
    /// Knot locations inside the domain (days, possibly dilated).
    pub knots: Vec<f64>,
    pub kind: SmoothKind,
    basis: Basis,
}

impl SmoothTerm {
    pub fn ncol(&self) -> usize {
        self.design.ncols()
    }

    /// Basis row (or its `deriv`-th derivative) at an arbitrary location.
    pub fn eval_row(&self, x: f64, deriv: usize) -> DVector<f64> {
        match &self.basis {
            Basis::Cubic { knots_ext } => DVector::from_vec(bspline_row(knots_ext, x, deriv)),
            Basis::Cyclic { period, k, constraint } => {
                let raw = DVector::from_vec(cyclic_row(*period, *k, x, deriv));
                constraint.transpose() * raw
            }
        }
    }

    pub fn design_at(&self, xs: &[f64]) -> DMatrix<f64> {
        let p = self.ncol();
        let mut m = DMatrix::zeros(xs.len(), p);
        for (i, &x) in xs.iter().enumerate() {
            m.set_row(i, &self.eval_row(x, 0).transpose());
        }
        m
    }

    /// Value (or derivative) of the spline with coefficients `beta` at `x`.
    pub fn eval(&self, beta: &DVector<f64>, x: f64, deriv: usize) -> f64 {
        self.eval_row(x, deriv).dot(beta)
    }

    /// Weighted sum of the penalty matrices.
    pub fn total_penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.ncol();
        let mut s = DMatrix::zeros(p, p);
        for (m, &l) in self.penalties.iter().zip(lambdas) {
            s += m * l;
        }
        s
    }
}

/// Cubic regression spline with `k` basis functions and evenly spaced knots
/// over the range of `grid`; the penalty is the integral of f''(t)^2.
pub fn cubic_basis(grid: &[f64], k: usize) -> Result<SmoothTerm> {
    let knots_ext = uniform_knots(grid, k)?;
    let design = design_matrix(&knots_ext, grid, k);
    let (a, b) = (grid[0], grid[grid.len() - 1]);
    let breaks = domain_knots(&knots_ext, a, b);
    let penalty = second_derivative_penalty(&breaks, k, |x| bspline_row(&knots_ext, x, 2), |_| 1.0);
    Ok(SmoothTerm {
        design,
        penalties: vec![penalty],
        knots: breaks,
        kind: SmoothKind::Cubic,
        basis: Basis::Cubic { knots_ext },
    })
}

/// Cubic spline with `k` basis functions whose wiggliness penalty is split
/// into `m` components, each weighting f''(t)^2 by a hat function. The
/// components sum to the ordinary cubic penalty, so equal smoothing
/// parameters reproduce [`cubic_basis`].
pub fn adaptive_penalty(grid: &[f64], k: usize, m: usize) -> Result<SmoothTerm> {
    if m == 0 || m >= k {
        return Err(Error::Dimension(format!(
            "adaptive smoother needs 1 <= m < k penalty components, got m={m}, k={k}"
        )));
    }
    let knots_ext = uniform_knots(grid, k)?;
    let design = design_matrix(&knots_ext, grid, k);
    let (a, b) = (grid[0], grid[grid.len() - 1]);
    let knots = domain_knots(&knots_ext, a, b);
    let centres: Vec<f64> = if m == 1 {
        vec![a]
    } else {
        (0..m).map(|i| a + (b - a) * i as f64 / (m - 1) as f64).collect()
    };
    let width = if m == 1 { f64::INFINITY } else { (b - a) / (m - 1) as f64 };
    let mut breaks: Vec<f64> = knots.iter().chain(centres.iter()).cloned().collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|x, y| (*x - *y).abs() < 1e-12 * (b - a).max(1.0));
    let penalties = centres
        .iter()
        .map(|&c| {
            second_derivative_penalty(&breaks, k, |x| bspline_row(&knots_ext, x, 2), |x| {
                if m == 1 {
                    1.0
                } else {
                    (1.0 - (x - c).abs() / width).max(0.0)
                }
            })
        })
        .collect();
    Ok(SmoothTerm {
        design,
        penalties,
        knots,
        kind: SmoothKind::Adaptive,
        basis: Basis::Cubic { knots_ext },
    })
}

/// Cyclic cubic spline on `[0, period)` with `k` evenly spaced knots and a
/// sum-to-zero constraint over the days `1..=period` absorbed into the basis.
/// The design is evaluated at days `1..=period`; use
/// [`SmoothTerm::design_at`] for data.
pub fn cyclic_basis(period: f64, k: usize) -> Result<SmoothTerm> {
    if k < 3 {
        return Err(Error::Dimension(format!("cyclic basis needs k >= 3, got {k}")));
    }
    if !(period > 0.0) {
        return Err(Error::Input("cyclic period must be positive".into()));
    }
    let days: Vec<f64> = (1..=period.round() as usize).map(|d| d as f64).collect();
    let mut raw = DMatrix::zeros(days.len(), k);
    for (i, &d) in days.iter().enumerate() {
        raw.set_row(i, &DVector::from_vec(cyclic_row(period, k, d, 0)).transpose());
    }
    let h = period / k as f64;
    let knots: Vec<f64> = (0..=k).map(|j| j as f64 * h).collect();
    let penalty_raw = second_derivative_penalty(&knots, k, |x| cyclic_row(period, k, x, 2), |_| 1.0);

    let c: DVector<f64> = raw.row_sum().transpose();
    let z = sum_to_zero_null_space(&c);
    let design = &raw * &z;
    let penalty = z.transpose() * penalty_raw * &z;
    Ok(SmoothTerm {
        design,
        penalties: vec![penalty],
        knots: knots[..k].to_vec(),
        kind: SmoothKind::Cyclic,
        basis: Basis::Cyclic { period, k, constraint: z },
    })
}

/// Stretch the day grid so that the days before, of and after `anchor` have
/// the given widths while every other day has width one. Positions are the
/// midpoints of the stretched days, starting from `grid[0]`.
pub fn dilate_grid(grid: &[f64], anchor: f64, weights: (f64, f64, f64)) -> Result<Vec<f64>> {
    check_increasing(grid)?;
    let idx = grid
        .iter()
        .position(|&g| (g - anchor).abs() < 1e-9)
        .ok_or_else(|| Error::Input(format!("anchor {anchor} is not a grid day")))?;
    if idx == 0 || idx + 1 >= grid.len() {
        return Err(Error::Input(format!("anchor {anchor} must be interior to the grid")));
    }
    let (wb, wa, wn) = weights;
    if !(wb > 0.0 && wa > 0.0 && wn > 0.0) {
        return Err(Error::Input("dilation weights must be positive".into()));
    }
    let width = |i: usize| -> f64 {
        if i + 1 == idx {
            wb
        } else if i == idx {
            wa
        } else if i == idx + 1 {
            wn
        } else {
            1.0
        }
    };
    let mut out = Vec::with_capacity(grid.len());
    out.push(grid[0]);
    for i in 1..grid.len() {
        let step = (grid[i] - grid[i - 1]) * 0.5 * (width(i - 1) + width(i));
        out.push(out[i - 1] + step);
    }
    Ok(out)
}

fn check_increasing(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Input("grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("grid must be strictly increasing".into()));
    }
    Ok(())
}

fn uniform_knots(grid: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 4 {
        return Err(Error::Dimension(format!("cubic basis needs k >= 4, got {k}")));
    }
    if k > grid.len() {
        return Err(Error::Dimension(format!(
            "basis dimension {k} exceeds grid length {}",
            grid.len()
        )));
    }
    check_increasing(grid)?;
    let (a, b) = (grid[0], grid[grid.len() - 1]);
    let intervals = k - 3;
    let h = (b - a) / intervals as f64;
    Ok((0..k + 4).map(|i| a + (i as f64 - 3.0) * h).collect())
}

fn domain_knots(knots_ext: &[f64], a: f64, b: f64) -> Vec<f64> {
    let n = knots_ext.len();
    let mut v: Vec<f64> = knots_ext[3..n - 3].to_vec();
    v[0] = a;
    let last = v.len() - 1;
    v[last] = b;
    v
}

fn design_matrix(knots_ext: &[f64], grid: &[f64], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(grid.len(), k);
    for (i, &x) in grid.iter().enumerate() {
        for (j, v) in bspline_row(knots_ext, x, 0).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

/// Integral over `breaks[0]..breaks[last]` of `w(x) * r(x) r(x)^T` where `r`
/// is the second derivative basis row.
fn second_derivative_penalty<F, W>(breaks: &[f64], k: usize, row: F, weight: W) -> DMatrix<f64>
where
    F: Fn(f64) -> Vec<f64>,
    W: Fn(f64) -> f64,
{
    let mut s = DMatrix::zeros(k, k);
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for &(node, gw) in &GAUSS2 {
            let x = mid + half * node;
            let r = row(x);
            let c = gw * half * weight(x);
            for i in 0..k {
                if r[i] == 0.0 {
                    continue;
                }
                for j in 0..k {
                    s[(i, j)] += c * r[i] * r[j];
                }
            }
        }
    }
    s
}

/// Orthonormal basis (k x (k-1)) for the complement of `c`, from a
/// Householder reflection mapping `c` onto the first axis.
fn sum_to_zero_null_space(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let vv = v.dot(&v);
    let h = DMatrix::identity(k, k) - (&v * v.transpose()) * (2.0 / vv);
    h.columns(1, k - 1).into_owned()
}

/// All cubic B-spline basis functions (or a derivative up to order 2) at `x`
/// for an extended knot vector.
pub(crate) fn bspline_row(knots: &[f64], x: f64, deriv: usize) -> Vec<f64> {
    const P: usize = 3;
    let nk = knots.len();
    let nb = nk - P - 1;
    // table[d][i] = B_{i,d}(x), defined for i < nk - 1 - d
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(P + 1);
    let mut deg0 = vec![0.0; nk - 1];
    let last_span = nk - P - 2;
    let mut span = None;
    for i in 0..nk - 1 {
        if knots[i] <= x && x < knots[i + 1] {
            span = Some(i);
            break;
        }
    }
    if span.is_none() && (x - knots[last_span + 1]).abs() < 1e-12 * (1.0 + x.abs()) {
        span = Some(last_span);
    }
    if let Some(s) = span {
        deg0[s] = 1.0;
    }
    table.push(deg0);
    for d in 1..=P {
        let prev = &table[d - 1];
        let mut cur = vec![0.0; nk - 1 - d];
        for i in 0..nk - 1 - d {
            let mut v = 0.0;
            let den1 = knots[i + d] - knots[i];
            if den1 > 0.0 {
                v += (x - knots[i]) / den1 * prev[i];
            }
            let den2 = knots[i + d + 1] - knots[i + 1];
            if den2 > 0.0 {
                v += (knots[i + d + 1] - x) / den2 * prev[i + 1];
            }
            cur[i] = v;
        }
        table.push(cur);
    }
    (0..nb).map(|i| deriv_value(knots, &table, i, P, deriv)).collect()
}

fn deriv_value(knots: &[f64], table: &[Vec<f64>], i: usize, p: usize, r: usize) -> f64 {
    if r == 0 {
        return table[p][i];
    }
    let mut v = 0.0;
    let den1 = knots[i + p] - knots[i];
    if den1 > 0.0 {
        v += deriv_value(knots, table, i, p - 1, r - 1) / den1;
    }
    let den2 = knots[i + p + 1] - knots[i + 1];
    if den2 > 0.0 {
        v -= deriv_value(knots, table, i + 1, p - 1, r - 1) / den2;
    }
    p as f64 * v
}

/// Cardinal cubic B-spline centred at 0 with support [-2, 2].
fn cardinal(u: f64, deriv: usize) -> f64 {
    let a = u.abs();
    if a >= 2.0 {
        return 0.0;
    }
    match (deriv, a <= 1.0) {
        (0, true) => 2.0 / 3.0 - a * a + 0.5 * a * a * a,
        (0, false) => (2.0 - a).powi(3) / 6.0,
        (1, true) => -2.0 * u + 1.5 * u * a,
        (1, false) => -u.signum() * 0.5 * (2.0 - a).powi(2),
        (2, true) => -2.0 + 3.0 * a,
        (2, false) => 2.0 - a,
        _ => 0.0,
    }
}

fn cyclic_row(period: f64, k: usize, x: f64, deriv: usize) -> Vec<f64> {
    let h = period / k as f64;
    let x = x.rem_euclid(period);
    let scale = h.powi(-(deriv as i32));
    (0..k)
        .map(|j| {
            let centre = j as f64 * h;
            (-2i32..=2)
                .map(|m| cardinal((x - centre - m as f64 * period) / h, deriv))
                .sum::<f64>()
                * scale
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn days(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn cubic_constants_and_lines_are_unpenalized() {
        let t = cubic_basis(&days(100), 20).unwrap();
        assert_eq!(t.design.shape(), (100, 20));
        let s = &t.penalties[0];
        let ones = DVector::from_element(20, 1.0);
        assert!((s * &ones).amax() < 1e-9);
        // Greville abscissae give the identity function
        let beta = DVector::from_vec(greville(&t));
        assert!(beta.dot(&(s * &beta)).abs() < 1e-9);
        for (i, x) in days(100).iter().enumerate() {
            assert!((t.design.row(i).dot(&beta.transpose()) - x).abs() < 1e-8);
        }
    }

    fn greville(t: &SmoothTerm) -> Vec<f64> {
        match &t.basis {
            Basis::Cubic { knots_ext } => (0..t.ncol())
                .map(|j| (knots_ext[j + 1] + knots_ext[j + 2] + knots_ext[j + 3]) / 3.0)
                .collect(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn cubic_penalty_matches_quadrature() {
        let grid = days(31);
        let t = cubic_basis(&grid, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let beta = DVector::from_fn(10, |_, _| rng.random_range(-2.0..2.0));
            let quad = beta.dot(&(&t.penalties[0] * &beta));
            // piecewise integration, each knot interval separately
            let mut num = 0.0;
            for w in t.knots.windows(2) {
                num += simpson(|x| t.eval(&beta, x, 2).powi(2), w[0], w[1], 200);
            }
            assert!(((quad - num) / num).abs() < 1e-6, "{quad} vs {num}");
        }
    }

    #[test]
    fn cubic_dimension_errors() {
        assert!(matches!(cubic_basis(&days(10), 3), Err(Error::Dimension(_))));
        assert!(matches!(cubic_basis(&days(10), 11), Err(Error::Dimension(_))));
        assert!(matches!(cubic_basis(&[0.0, 2.0, 1.0, 3.0, 4.0], 4), Err(Error::Input(_))));
    }

    #[test]
    fn cyclic_is_periodic_and_zero_mean() {
        let t = cyclic_basis(7.0, 7).unwrap();
        assert_eq!(t.ncol(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let beta = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            for d in 0..3 {
                let v0 = t.eval_row(0.0, d).dot(&beta);
                let v7 = t.eval_row(7.0 - 1e-12, d).dot(&beta);
                assert!((v0 - v7).abs() < 1e-8, "deriv {d}: {v0} vs {v7}");
            }
            let mean: f64 = (1..=7).map(|d| t.eval(&beta, d as f64, 0)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-10);
        }
        assert!(matches!(cyclic_basis(7.0, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn cyclic_penalty_matches_quadrature() {
        let t = cyclic_basis(7.0, 5).unwrap();
        let beta = DVector::from_vec(vec![0.3, -1.0, 0.7, 0.2]);
        let quad = beta.dot(&(&t.penalties[0] * &beta));
        let h = 7.0 / 5.0;
        let num: f64 = (0..5)
            .map(|j| simpson(|x| t.eval(&beta, x, 2).powi(2), j as f64 * h, (j + 1) as f64 * h, 200))
            .sum();
        assert!(((quad - num) / num).abs() < 1e-8);
    }

    #[test]
    fn adaptive_components_sum_to_cubic_penalty() {
        let grid = days(400);
        let a = adaptive_penalty(&grid, 40, 5).unwrap();
        assert_eq!(a.penalties.len(), 5);
        let c = cubic_basis(&grid, 40).unwrap();
        let total = a.total_penalty(&[1.0; 5]);
        assert!((&total - &c.penalties[0]).amax() < 1e-8 * c.penalties[0].amax());
        for s in &a.penalties {
            let (min, max) = crate::linalg::min_max_eigenvalues(s);
            assert!(min >= -1e-10 * max);
        }
        let one = adaptive_penalty(&days(50), 10, 1).unwrap();
        let c = cubic_basis(&days(50), 10).unwrap();
        assert!((&one.penalties[0] - &c.penalties[0]).amax() < 1e-10);
        assert!(matches!(adaptive_penalty(&days(50), 10, 10), Err(Error::Dimension(_))));
    }

    #[test]
    fn dilation_lengths() {
        let g = days(11);
        let d = dilate_grid(&g, 5.0, (3.5, 6.0, 3.5)).unwrap();
        assert!((d[10] - d[0] - 20.0).abs() < 1e-12);
        assert!(d.windows(2).all(|w| w[1] > w[0]));
        let id = dilate_grid(&g, 5.0, (1.0, 1.0, 1.0)).unwrap();
        assert_eq!(id, g);
        assert!(dilate_grid(&g, 0.0, (3.5, 6.0, 3.5)).is_err());
        assert!(dilate_grid(&g, 10.0, (3.5, 6.0, 3.5)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn penalties_are_psd(seed in 0u64..1000, k in 4usize..25) {
                let grid = days(60);
                let terms = [
                    cubic_basis(&grid, k).unwrap(),
                    cyclic_basis(7.0, (k % 5) + 3).unwrap(),
                    adaptive_penalty(&grid, k.max(6), 3).unwrap(),
                ];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for t in &terms {
                    for s in &t.penalties {
                        for _ in 0..20 {
                            let b = DVector::from_fn(t.ncol(), |_, _| rng.random_range(-5.0..5.0));
                            prop_assert!(b.dot(&(s * &b)) >= -1e-9 * s.amax());
                        }
                    }
                }
            }

            #[test]
            fn dilated_grid_is_increasing(w0 in 0.1f64..10.0, w1 in 0.1f64..10.0, w2 in 0.1f64..10.0, anchor in 1usize..29) {
                let d = dilate_grid(&days(30), anchor as f64, (w0, w1, w2)).unwrap();
                prop_assert!(d.windows(2).all(|w| w[1] > w[0]));
            }
        }
    }
}
