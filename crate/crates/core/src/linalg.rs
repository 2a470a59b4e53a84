//! Small dense linear-algebra kernels: Cholesky factorization, its reverse-mode
//! derivative, and triangular solves. Covariance blocks are tiny (embedding
//! width squared), so everything is hand-rolled over `ndarray` storage.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Lower Cholesky factor of a positive-definite matrix. Only the lower
/// triangle of `a` (including the diagonal) is read.
pub fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) {
            return Err(Error::Numeric(format!(
                "cholesky pivot {j} not positive (got {diag:e})"
            )));
        }
        let root = diag.sqrt();
        l[[j, j]] = root;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / root;
        }
    }
    Ok(l)
}

/// Solves `L^T x = b` column-by-column (backward substitution with the
/// transpose of a lower-triangular factor).
fn solve_lt(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = b.clone();
    for col in 0..m {
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    x
}

/// Reverse-mode derivative of `cholesky_lower`.
///
/// Given the factor `l` of `A = L L^T` and the cotangent `l_bar` accumulated
/// on `L`, returns the cotangent on the stored input matrix under the
/// convention that the factorization reads only the lower triangle: the
/// result has zero upper triangle, and off-diagonal lower entries carry the
/// combined sensitivity of the symmetric pair.
pub fn cholesky_lower_rev(l: &Array2<f64>, l_bar: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    // Structural zeros above the diagonal of L are not free parameters.
    let mut lb = l_bar.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            lb[[i, j]] = 0.0;
        }
    }
    // phi(L^T lb): lower triangle with halved diagonal.
    let mut t = l.t().dot(&lb);
    for i in 0..n {
        t[[i, i]] *= 0.5;
        for j in (i + 1)..n {
            t[[i, j]] = 0.0;
        }
    }
    // a_full = L^{-T} t L^{-1}, via two triangular solves.
    let x = solve_lt(l, &t);
    let a_full_t = solve_lt(l, &x.t().to_owned());
    let a_full = a_full_t.t().to_owned();
    // Fold the symmetric pair onto the stored lower triangle.
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = a_full[[i, i]];
        for j in 0..i {
            out[[i, j]] = a_full[[i, j]] + a_full[[j, i]];
        }
    }
    out
}

/// Determinant of `A = L L^T` from its factor, via the log-domain product of
/// the squared diagonal. Stays finite for strongly scaled covariances.
pub fn det_from_cholesky(l: &Array2<f64>) -> f64 {
    let log_det: f64 = l.diag().iter().map(|d| d.ln()).sum();
    (2.0 * log_det).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn factorizes_known_matrix() {
        let a = array![[4.0, 2.0], [2.0, 5.0]];
        let l = cholesky_lower(&a).unwrap();
        let back = l.dot(&l.t());
        assert_abs_diff_eq!(back, a, epsilon = 1e-12);
        assert_abs_diff_eq!(det_from_cholesky(&l), 16.0, epsilon = 1e-10);
    }

    #[test]
    fn rejects_non_positive_definite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky_lower(&a).is_err());
    }

    #[test]
    fn reverse_matches_finite_differences() {
        // f(A) = sum of L entries; compare against central differences on the
        // lower triangle of A.
        let a = array![[3.0, 1.0, 0.2], [1.0, 2.5, 0.4], [0.2, 0.4, 1.8]];
        let l = cholesky_lower(&a).unwrap();
        let l_bar = Array2::ones((3, 3));
        let grad = cholesky_lower_rev(&l, &l_bar);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut ap = a.clone();
                let mut am = a.clone();
                // Perturb the symmetric pair the way an outer-product
                // construction would move it.
                ap[[i, j]] += h;
                am[[i, j]] -= h;
                if i != j {
                    ap[[j, i]] += h;
                    am[[j, i]] -= h;
                }
                let fp: f64 = cholesky_lower(&ap).unwrap().iter().sum();
                let fm: f64 = cholesky_lower(&am).unwrap().iter().sum();
                let fd = (fp - fm) / (2.0 * h);
                assert_abs_diff_eq!(grad[[i, j]], fd, epsilon = 1e-6);
            }
        }
    }
}
