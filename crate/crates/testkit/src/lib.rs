//! Independent numerical oracles for the unida test suites.
//!
//! The routines here deliberately avoid the code paths used by the library
//! under test: the eigendecomposition is a classic cyclic Jacobi sweep, so it
//! can serve as a reference for the tridiagonalization-based solver that
//! backs the production code.

use nalgebra::DMatrix;

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted in
/// non-increasing order and eigenvectors as the corresponding columns.
/// Panics if the sweep fails to converge, which for symmetric input only
/// happens on non-finite data.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);

    let off = |m: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s
    };

    let scale: f64 = (0..n).map(|i| m[(i, i)].abs()).fold(1e-300, f64::max);
    let tol = (scale * 1e-14).powi(2) * (n * n) as f64;

    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= scale * 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    (values, vectors)
}

/// Largest eigenvalue of a symmetric matrix via the Jacobi oracle.
pub fn jacobi_max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    jacobi_eigen(a).0[0]
}

/// Principal angles (radians) between the column spans of two
/// orthonormal-column matrices of equal shape.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(a.shape(), b.shape());
    let m = a.transpose() * b;
    let svd = m.svd(false, false);
    let mut cosines: Vec<f64> = svd.singular_values.iter().copied().collect();
    cosines.sort_by(|x, y| y.partial_cmp(x).unwrap());
    cosines.iter().map(|c| c.min(1.0).acos()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_eigenvalues_sorted() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 5.0, 3.0]));
        let (vals, _) = jacobi_eigen(&a);
        assert_eq!(vals, vec![5.0, 3.0, 1.0]);
    }

    #[test]
    fn reconstructs_symmetric_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 6.0]);
        let (vals, vecs) = jacobi_eigen(&a);
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vals));
        let rebuilt = &vecs * lambda * vecs.transpose();
        assert!((rebuilt - a).abs().max() < 1e-12);
    }

    #[test]
    fn eigenvectors_orthonormal() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (_, vecs) = jacobi_eigen(&a);
        let gram = vecs.transpose() * &vecs;
        assert!((gram - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn identical_subspaces_have_zero_angles() {
        let q = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let angles = principal_angles(&q, &q);
        assert!(angles.iter().all(|&t| t < 1e-12));
    }
}
