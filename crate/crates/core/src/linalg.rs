//! Dense Cholesky utilities.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Lower Cholesky factor of a symmetric matrix. Only the lower triangle is read.
///
/// On failure the error carries the 1-based index of the first leading minor
/// that is not positive.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: a.ncols() });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j + 1 });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Jitter schedule: `scale·1e-6`, then ×10 up to `scale·1e-2`.
pub fn jitter_schedule(scale: f64) -> impl Iterator<Item = f64> {
    (0..5).map(move |i| scale * 1e-6 * 10f64.powi(i))
}

/// Cholesky of `a`, retrying with escalating diagonal jitter relative to
/// `scale` when the plain factorization fails. Returns the factor and the
/// jitter that was added (0 when none was needed).
pub fn cholesky_escalating(a: &DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    match cholesky(a) {
        Ok(l) => return Ok((l, 0.0)),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let mut last = Error::NotPositiveDefinite { minor: 1 };
    for eps in jitter_schedule(scale.abs().max(f64::MIN_POSITIVE)) {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += eps;
        }
        match cholesky(&b) {
            Ok(l) => return Ok((l, eps)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_t(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    l.tr_solve_lower_triangular_mut(&mut x);
    x
}

/// Solves `M X = B` for symmetric positive-definite `M`.
pub fn chol_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != m.nrows() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), found: b.nrows() });
    }
    let l = cholesky(m)?;
    Ok(solve_lower_t(&l, &solve_lower(&l, b)))
}

/// `log|M|` from the Cholesky factor of `M`.
pub fn logdet_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    chol_solve(m, &DMatrix::identity(m.nrows(), m.nrows()))
}

/// log N(x | mean, cov).
pub fn log_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky(cov)?;
    let r = DMatrix::from_column_slice(x.len(), 1, (x - mean).as_slice());
    let a = solve_lower(&l, &r);
    let n = x.len() as f64;
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet_from_chol(&l) - 0.5 * a.norm_squared())
}

/// Symmetric part `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::stream(seed, &[]);
        let a = DMatrix::from_vec(n, n, crate::rng::normals(&mut rng, n * n));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn identity_solves() {
        let b = DMatrix::from_row_slice(2, 1, &[3.0, -1.0]);
        assert_eq!(chol_solve(&DMatrix::identity(2, 2), &b).unwrap(), b);
        let x = chol_solve(&(DMatrix::identity(2, 2) * 2.0), &DMatrix::identity(2, 2)).unwrap();
        assert!((x - DMatrix::identity(2, 2) * 0.5).norm() < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        let m = random_spd(5, 3);
        let mut rng = crate::rng::stream(4, &[]);
        let b = DMatrix::from_vec(5, 2, crate::rng::normals(&mut rng, 10));
        let x = chol_solve(&m, &b).unwrap();
        assert!((&m * x - &b).norm() / b.norm() < 1e-8);
    }

    #[test]
    fn failing_minor_is_reported() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 1.0]);
        assert_eq!(cholesky(&m).unwrap_err(), Error::NotPositiveDefinite { minor: 3 });
    }

    #[test]
    fn escalation_rescues_semidefinite() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let (l, eps) = cholesky_escalating(&m, 14.0).unwrap();
        assert!(eps > 0.0 && eps <= 14.0 * 1e-2);
        assert!((&l * l.transpose() - &m).norm() < 0.2);
        let neg = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(cholesky_escalating(&neg, 1.0).is_err());
    }

    #[test]
    fn log_mvn_standard() {
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let v = log_mvn(&x, &x, &DMatrix::identity(2, 2)).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }
}
