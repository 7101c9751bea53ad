//! Small dense linear algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::LinAlg("matrix is not positive definite".into()))
}

/// Cholesky of `m + ridge*I`, growing the ridge until the factorisation succeeds.
/// Returns the factor and the ridge that was used.
pub fn cholesky_with_ridge(m: &DMatrix<f64>) -> (Cholesky<f64, Dyn>, f64) {
    if let Some(c) = Cholesky::new(m.clone()) {
        return (c, 0.0);
    }
    let scale = m.diagonal().iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-8);
    let mut ridge = scale * 1e-8;
    loop {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return (c, ridge);
        }
        ridge *= 10.0;
    }
}

pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetrise in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Pseudo-inverse and log pseudo-determinant of a symmetric PSD matrix of known rank.
pub struct PseudoInverse {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

pub fn pseudo_inverse(m: &DMatrix<f64>, rank: usize) -> PseudoInverse {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut inverse = DMatrix::zeros(n, n);
    let mut log_det = 0.0;
    for &i in order.iter().take(rank) {
        let ev = eig.eigenvalues[i].max(f64::MIN_POSITIVE);
        log_det += ev.ln();
        let v = eig.eigenvectors.column(i);
        inverse += (v * v.transpose()) / ev;
    }
    PseudoInverse { inverse, log_det }
}

/// Numerical rank of a symmetric PSD matrix.
pub fn psd_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    eig.eigenvalues.iter().filter(|&&v| v > rel_tol * max).count()
}

pub fn min_max_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Trace of `a * b` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut t = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            t += a[(i, k)] * b[(k, i)];
        }
    }
    t
}
