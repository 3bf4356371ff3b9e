//! Dense linear-algebra kernels used by the orthogonalization layer and the
//! exact eigen-oracle.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Result, SparcError};

/// Largest order handled by cyclic Jacobi before the eigen-oracle switches to
/// Householder tridiagonalization with implicit QR.
pub const JACOBI_MAX_ORDER: usize = 320;

/// Lower Cholesky factor `L` with `L Lᵀ = a`, or `None` if `a` is not
/// numerically positive definite.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for p in 0..j {
            diag -= l[[j, p]] * l[[j, p]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for p in 0..j {
                s -= l[[i, p]] * l[[j, p]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

/// Inverse of a nonsingular lower-triangular matrix by forward substitution.
pub fn lower_triangular_inverse(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        inv[[col, col]] = 1.0 / l[[col, col]];
        for i in (col + 1)..n {
            let mut s = 0.0;
            for p in col..i {
                s += l[[i, p]] * inv[[p, col]];
            }
            inv[[i, col]] = -s / l[[i, i]];
        }
    }
    inv
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Array1<f64>,
    /// One column per eigenvalue.
    pub vectors: Array2<f64>,
}

/// Cyclic-by-row Jacobi rotations. Returns eigenpairs sorted ascending.
pub fn jacobi_eigen(a: ArrayView2<f64>) -> SymmetricEigen {
    let n = a.nrows();
    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = f64::EPSILON * frob.max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= threshold * 1e-3 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // A <- A J
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                // A <- Jᵀ A
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let vectors = Array2::from_shape_vec((n, n), v).expect("square buffer");
    sorted_eigen(values, vectors)
}

/// Householder tridiagonalization followed by implicit symmetric QR, via
/// `nalgebra`. Used above [`JACOBI_MAX_ORDER`].
pub fn tridiagonal_qr_eigen(a: ArrayView2<f64>) -> SymmetricEigen {
    let n = a.nrows();
    let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = nalgebra::SymmetricEigen::new(dm);
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let vectors = Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, j)]);
    sorted_eigen(values, vectors)
}

/// Dispatches on matrix order; both routes return ascending eigenpairs.
pub fn symmetric_eigen(a: ArrayView2<f64>) -> SymmetricEigen {
    if a.nrows() <= JACOBI_MAX_ORDER {
        jacobi_eigen(a)
    } else {
        tridiagonal_qr_eigen(a)
    }
}

fn sorted_eigen(values: Vec<f64>, vectors: Array2<f64>) -> SymmetricEigen {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let sorted_values = Array1::from_iter(order.iter().map(|&i| values[i]));
    let mut sorted_vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        sorted_vectors.column_mut(dst).assign(&vectors.column(src));
    }
    SymmetricEigen {
        values: sorted_values,
        vectors: sorted_vectors,
    }
}

/// Orthonormal basis for the column space of `a` (two passes of modified
/// Gram-Schmidt). Fails when a column collapses below `rank_tol` relative to
/// its original norm.
pub fn orthonormalize(a: ArrayView2<f64>, rank_tol: f64) -> Result<Array2<f64>> {
    let (n, k) = a.dim();
    if k > n {
        return Err(SparcError::DegenerateInput(format!(
            "{k} columns cannot be independent in dimension {n}"
        )));
    }
    let mut q = a.to_owned();
    for j in 0..k {
        let original = q.column(j).dot(&q.column(j)).sqrt();
        for _pass in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let qi = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &qi);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if !(norm > rank_tol * original.max(f64::MIN_POSITIVE)) || original == 0.0 {
            return Err(SparcError::DegenerateInput(format!(
                "column {j} is linearly dependent on the preceding columns"
            )));
        }
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    Ok(q)
}

/// Singular values of a small matrix, descending, through the eigenvalues of
/// `mᵀm`.
pub fn singular_values(m: ArrayView2<f64>) -> Vec<f64> {
    let gram = m.t().dot(&m);
    let eig = jacobi_eigen(gram.view());
    let mut s: Vec<f64> = eig.values.iter().map(|&x| x.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Largest absolute entry of `a - I`.
pub fn max_identity_deviation(a: ArrayView2<f64>) -> f64 {
    a.indexed_iter()
        .map(|((i, j), &x)| (x - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(seed);
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.random_range(-1.0..1.0);
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let inv = lower_triangular_inverse(l.view());
        assert!(max_identity_deviation(inv.dot(&l).view()) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(cholesky(a.view()).is_none());
    }

    #[test]
    fn jacobi_two_by_two() {
        let a = array![[0.5, -0.5], [-0.5, 0.5]];
        let eig = jacobi_eigen(a.view());
        assert!((eig.values[0]).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
        let v0 = eig.vectors.column(0);
        assert!((v0[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
        assert!((v0[0] - v0[1]).abs() < 1e-14);
    }

    #[test]
    fn jacobi_and_tridiagonal_routes_agree() {
        let a = random_symmetric(40, 3);
        let j = jacobi_eigen(a.view());
        let t = tridiagonal_qr_eigen(a.view());
        for (x, y) in j.values.iter().zip(t.values.iter()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        for c in 0..40 {
            let v = j.vectors.column(c);
            let r = a.dot(&v) - &v * j.values[c];
            assert!(r.dot(&r).sqrt() < 1e-10);
        }
    }

    #[test]
    fn orthonormalize_detects_dependence() {
        let a = array![[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]];
        assert!(orthonormalize(a.view(), 1e-10).is_err());
        let b = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let q = orthonormalize(b.view(), 1e-10).unwrap();
        assert!(max_identity_deviation(q.t().dot(&q).view()) < 1e-14);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let m = array![[3.0, 0.0], [0.0, -2.0]];
        let s = singular_values(m.view());
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12);
    }
}
