//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal when a covariance fails to factor.
pub const JITTER: f64 = 1e-8;

/// Cholesky factorisation with a single jitter retry.
///
/// Returns the factor and whether jitter was needed. The jitter is
/// `JITTER * mean(diag)`.
pub fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, false));
    }
    let n = m.nrows();
    if n == 0 {
        return Err(Error::NotPositiveDefinite);
    }
    let scale = (0..n).map(|i| m[(i, i)].abs()).sum::<f64>() / n as f64;
    let eps = JITTER * scale.max(f64::MIN_POSITIVE);
    for i in 0..n {
        m[(i, i)] += eps;
    }
    Cholesky::new(m)
        .map(|c| (c, true))
        .ok_or(Error::NotPositiveDefinite)
}

/// Solves `L v = b` for the lower Cholesky factor `L`, column by column.
///
/// Kept as an explicit loop so that every right-hand side is processed with
/// the same operation order no matter how many are solved together.
pub fn forward_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let mut v = b.to_vec();
    for i in 0..n {
        let mut s = v[i];
        for k in 0..i {
            s -= l[(i, k)] * v[k];
        }
        v[i] = s / l[(i, i)];
    }
    v
}

/// Solves `Lᵀ v = b` for the lower Cholesky factor `L`.
pub fn backward_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut v = b.to_vec();
    for i in (0..n).rev() {
        let mut s = v[i];
        for k in i + 1..n {
            s -= l[(k, i)] * v[k];
        }
        v[i] = s / l[(i, i)];
    }
    v
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Indices of columns that are (numerically) linear combinations of the
/// columns before them, found by modified Gram–Schmidt.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let (n, q) = x.shape();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(q);
    let mut bad = Vec::new();
    for j in 0..q {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        // second pass for stability
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-10 * norm0.max(1e-300) * (n as f64).sqrt().max(1.0) {
            bad.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    bad
}

/// Least squares with optional row weights, solved by QR of `sqrt(W) X`.
pub fn weighted_least_squares(x: &DMatrix<f64>, z: &[f64], w: Option<&[f64]>) -> Result<Vec<f64>> {
    let (n, q) = x.shape();
    let mut a = x.clone();
    let mut b = DVector::from_column_slice(z);
    if let Some(w) = w {
        for i in 0..n {
            let s = w[i].max(0.0).sqrt();
            b[i] *= s;
            for j in 0..q {
                a[(i, j)] *= s;
            }
        }
    }
    let qr = a.qr();
    let r = qr.r();
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .map(|v| v.iter().copied().collect())
        .ok_or_else(|| Error::RankDeficient(dependent_columns(x)))
}
