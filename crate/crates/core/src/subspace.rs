//! Linear subspace extraction from the joint source + target feature set.
//!
//! The projector centers the data and keeps the leading eigenvectors of the
//! feature covariance, either a fixed number of them or enough to capture a
//! requested fraction of the spectrum. Neighbor searches downstream run in
//! the projected coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error("need at least 2 samples to estimate a covariance, got {0}")]
    TooFewSamples(usize),
    #[error("symmetric eigendecomposition did not converge")]
    DecompositionFailure,
    #[error("input has {got} columns, projector expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid policy: {0}")]
    BadPolicy(String),
}

/// How many principal directions to retain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspacePolicy {
    /// Smallest dimension count whose eigenvalue mass reaches this fraction.
    Energy(f64),
    /// Exactly this many dimensions.
    Fixed(usize),
}

impl Default for SubspacePolicy {
    fn default() -> Self {
        SubspacePolicy::Energy(0.9)
    }
}

/// Centering mean plus an orthonormal basis of the retained subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceProjector {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl SubspaceProjector {
    /// Rebuilds a projector from stored parts, revalidating its invariants.
    pub fn from_parts(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        singular_values: Vec<f64>,
    ) -> Result<Self, SubspaceError> {
        let m = mean.len();
        let p = basis.ncols();
        if basis.nrows() != m || p == 0 || p > m || singular_values.len() != m {
            return Err(SubspaceError::BadPolicy(
                "inconsistent projector shapes".into(),
            ));
        }
        let gram = basis.transpose() * &basis;
        if (gram - DMatrix::identity(p, p)).abs().max() > 1e-8 {
            return Err(SubspaceError::BadPolicy("basis is not orthonormal".into()));
        }
        if singular_values.windows(2).any(|w| w[0] < w[1]) {
            return Err(SubspaceError::BadPolicy(
                "singular values are not sorted".into(),
            ));
        }
        Ok(SubspaceProjector {
            mean,
            basis,
            singular_values,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn p(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Full eigenvalue spectrum of the fitted covariance, non-increasing.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Projects rows of `x`: `(x - mean) * basis`.
    pub fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, SubspaceError> {
        if x.ncols() != self.input_dim() {
            return Err(SubspaceError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut centered = x.clone();
        for i in 0..centered.nrows() {
            for j in 0..centered.ncols() {
                centered[(i, j)] -= self.mean[j];
            }
        }
        Ok(centered * &self.basis)
    }

    /// Projects a single row vector.
    pub fn project_vector(&self, x: &DVector<f64>) -> Result<DVector<f64>, SubspaceError> {
        if x.len() != self.input_dim() {
            return Err(SubspaceError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.basis.transpose() * (x - &self.mean))
    }
}

/// Column-mean of `z`.
fn column_mean(z: &DMatrix<f64>) -> DVector<f64> {
    let n = z.nrows() as f64;
    DVector::from_fn(z.ncols(), |j, _| z.column(j).sum() / n)
}

/// Feature covariance `(1/n) Zc' Zc` of the row-centered data.
pub fn compute_covariance(z: &DMatrix<f64>) -> Result<DMatrix<f64>, SubspaceError> {
    let n = z.nrows();
    if n < 2 {
        return Err(SubspaceError::TooFewSamples(n));
    }
    let mean = column_mean(z);
    let mut centered = z.clone();
    for i in 0..n {
        for j in 0..z.ncols() {
            centered[(i, j)] -= mean[j];
        }
    }
    let mut cov = centered.transpose() * &centered;
    cov /= n as f64;
    // enforce exact symmetry against rounding in the gemm
    let m = cov.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    Ok(cov)
}

/// Fits the projector on `z` (rows are samples).
///
/// The basis columns are eigenvectors of [`compute_covariance`] for the
/// largest eigenvalues. Each column's largest-magnitude entry is forced
/// positive so refits are reproducible regardless of eigensolver sign
/// choices.
pub fn fit_projector(
    z: &DMatrix<f64>,
    policy: SubspacePolicy,
) -> Result<SubspaceProjector, SubspaceError> {
    let m = z.ncols();
    match policy {
        SubspacePolicy::Fixed(p) if p == 0 || p > m => {
            return Err(SubspaceError::BadPolicy(format!(
                "fixed p={p} outside 1..={m}"
            )));
        }
        SubspacePolicy::Energy(e) if !(e > 0.0 && e <= 1.0) => {
            return Err(SubspaceError::BadPolicy(format!(
                "energy fraction {e} outside (0, 1]"
            )));
        }
        _ => {}
    }

    let cov = compute_covariance(z)?;
    let mean = column_mean(z);
    let eig = nalgebra::SymmetricEigen::try_new(cov, 1e-13, 10_000)
        .ok_or(SubspaceError::DecompositionFailure)?;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap()
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();

    let p = match policy {
        SubspacePolicy::Fixed(p) => p,
        SubspacePolicy::Energy(e) => {
            let total: f64 = values.iter().sum();
            let mut acc = 0.0;
            let mut p = m;
            for (idx, v) in values.iter().enumerate() {
                acc += v;
                if acc >= e * total {
                    p = idx + 1;
                    break;
                }
            }
            p
        }
    };

    let mut basis = DMatrix::<f64>::zeros(m, p);
    for (dst, &src) in order.iter().take(p).enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
    }
    for j in 0..p {
        let mut max_abs = 0.0;
        let mut max_val = 0.0;
        for i in 0..m {
            if basis[(i, j)].abs() > max_abs {
                max_abs = basis[(i, j)].abs();
                max_val = basis[(i, j)];
            }
        }
        if max_val < 0.0 {
            for i in 0..m {
                basis[(i, j)] = -basis[(i, j)];
            }
        }
    }

    Ok(SubspaceProjector {
        mean,
        basis,
        singular_values: values,
    })
}
