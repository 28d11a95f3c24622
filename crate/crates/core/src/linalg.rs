//! Small dense helpers shared by the graph and solver modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !all_finite(&a) {
        return Err(Error::numerical(format!("{what}: non-finite entries")));
    }
    Cholesky::new(a).ok_or_else(|| Error::numerical(format!("{what}: matrix is not positive definite")))
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !all_finite(b) {
        return Err(Error::numerical(format!("{what}: non-finite right-hand side")));
    }
    Ok(cholesky(a, what)?.solve(b))
}

pub fn spd_inverse(a: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(a, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn sym_eigen(a: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, Dyn>> {
    if !all_finite(a) {
        return Err(Error::numerical(format!("{what}: non-finite entries")));
    }
    let mut a = a.clone();
    symmetrize(&mut a);
    SymmetricEigen::try_new(a, f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical(format!("{what}: eigendecomposition did not converge")))
}

/// `V f(Λ) Vᵀ` for a symmetric eigendecomposition `V Λ Vᵀ`.
pub fn spectral_map(eig: &SymmetricEigen<f64, Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let w = f(lambda);
        scaled.column_mut(j).scale_mut(w);
    }
    let mut out = scaled * v.transpose();
    symmetrize(&mut out);
    out
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eigen(a, "min eigenvalue")?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Orthonormal basis of the complement of the constant vector in `R^n`,
/// returned as an n × (n−1) matrix.
///
/// Columns 2..n of the Householder reflector that swaps `1/√n` and `e₁`.
pub fn constant_complement_basis(n: usize) -> DMatrix<f64> {
    assert!(n >= 1);
    if n == 1 {
        return DMatrix::zeros(1, 0);
    }
    let e = 1.0 / (n as f64).sqrt();
    let mut u = DVector::from_element(n, e);
    u[0] -= 1.0;
    let uu = u.norm_squared();
    let mut q = DMatrix::<f64>::identity(n, n);
    q -= (&u * u.transpose()) * (2.0 / uu);
    q.columns(1, n - 1).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_basis_is_orthonormal_and_centered() {
        for n in [2, 3, 7, 20] {
            let v = constant_complement_basis(n);
            let gram = v.transpose() * &v;
            assert!((gram - DMatrix::identity(n - 1, n - 1)).amax() < 1e-14);
            let ones = DVector::from_element(n, 1.0);
            assert!((v.transpose() * ones).amax() < 1e-14);
        }
    }

    #[test]
    fn spectral_map_inverse_sqrt() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let eig = sym_eigen(&a, "t").unwrap();
        let s = spectral_map(&eig, |l| l.sqrt());
        assert!((&s * &s - &a).amax() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let a = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(cholesky(a, "t").unwrap_err().is_numerical());
    }
}
