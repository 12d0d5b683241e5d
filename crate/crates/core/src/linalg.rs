//! Dense factorizations shared by the oracle, spectral and sampling code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative diagonal jitter added once when the first factorization fails.
pub const JITTER_RELATIVE: f64 = 1e-10;

/// Cholesky factorization with a single fixed jitter retry.
///
/// The matrix is factorized as given. If that fails, `1e-10 * trace / n` is
/// added to the diagonal and the factorization is attempted once more; a
/// second failure is an error.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(chol);
    }
    let n = a.nrows();
    let trace = a.trace();
    let jitter = JITTER_RELATIVE * trace / n as f64;
    log::warn!("cholesky failed for n={n}; retrying with diagonal jitter {jitter:e}");
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).ok_or_else(|| {
        Error::numeric(format!(
            "matrix not positive definite after jitter {jitter:e} ({})",
            diagnostics(a)
        ))
    })
}

/// Eigenvalues of a symmetric matrix in descending order, from Householder
/// tridiagonalization followed by implicit-shift QR.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite entries in symmetric matrix ({})",
            diagnostics(a)
        )));
    }
    let eig = a.clone().symmetric_eigenvalues();
    let mut values: Vec<f64> = eig.iter().copied().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "eigensolver produced non-finite eigenvalues ({})",
            diagnostics(a)
        )));
    }
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(values)
}

/// Largest eigenvalue of a symmetric operator by Lanczos with full
/// reorthogonalization.
///
/// `apply` writes `A v` into its second argument. Iteration stops when the
/// Ritz residual of the top pair falls below `tol * |theta|` or the Krylov
/// space exhausts `n`.
pub fn lanczos_top_eigenvalue<F>(n: usize, tol: f64, mut apply: F) -> Result<f64>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>),
{
    if n == 0 {
        return Err(Error::invalid("empty operator"));
    }
    let max_steps = n.min(300);
    // Fixed start vector: all-ones plus a deterministic ripple so it is not
    // orthogonal to the top eigenvector of structured matrices.
    let mut q = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64) * 0.7548776662).sin());
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(max_steps);
    let mut alphas = Vec::with_capacity(max_steps);
    let mut betas: Vec<f64> = Vec::with_capacity(max_steps);
    let mut w = DVector::zeros(n);
    let mut theta = 0.0;

    for k in 0..max_steps {
        apply(&q, &mut w);
        let alpha = q.dot(&w);
        w.axpy(-alpha, &q, 1.0);
        if let Some(prev) = basis.last() {
            w.axpy(-betas[k - 1], prev, 1.0);
        }
        basis.push(q.clone());
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        alphas.push(alpha);
        let beta = w.norm();

        let m = alphas.len();
        let t = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                alphas[i]
            } else if i + 1 == j {
                betas[i]
            } else if j + 1 == i {
                betas[j]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(t);
        let (top, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        theta = eig.eigenvalues[top];
        let residual = beta * eig.eigenvectors[(m - 1, top)].abs();
        if residual <= tol * theta.abs().max(f64::MIN_POSITIVE) || beta <= f64::EPSILON * theta.abs() {
            return Ok(theta);
        }
        betas.push(beta);
        q = &w / beta;
    }
    if basis.len() == n {
        return Ok(theta);
    }
    Err(Error::numeric(format!(
        "Lanczos did not converge in {max_steps} steps (last estimate {theta:e})"
    )))
}

pub(crate) fn diagnostics(a: &DMatrix<f64>) -> String {
    let n = a.nrows();
    let diag = a.diagonal();
    let (dmin, dmax) = diag
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    format!(
        "n={n}, trace={:e}, frobenius={:e}, diag range=[{dmin:e}, {dmax:e}]",
        a.trace(),
        a.norm()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd_matrix() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let chol = cholesky_with_jitter(&a).unwrap();
        assert!(chol.l()[(2, 2)] > 0.0);
    }

    #[test]
    fn indefinite_matrix_fails_after_single_retry() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_with_jitter(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn eigenvalues_descend() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0]);
        let ev = symmetric_eigenvalues(&a).unwrap();
        assert!((ev[0] - 5.0).abs() < 1e-14);
        assert!((ev[1] - 3.0).abs() < 1e-14);
        assert!((ev[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lanczos_matches_dense_top() {
        let n = 60;
        let a = DMatrix::from_fn(n, n, |i, j| (-((i as f64 - j as f64) / 7.0).powi(2)).exp());
        let dense = symmetric_eigenvalues(&a).unwrap()[0];
        let top = lanczos_top_eigenvalue(n, 1e-13, |v, out| out.gemv(1.0, &a, v, 0.0)).unwrap();
        assert!((dense - top).abs() <= 1e-10 * dense, "{dense} vs {top}");
    }
}
