//! Neighbor-consistency uncertainty scores, the known/unknown split, the
//! spectral delta filter, and the density/posterior diagnostics.
//!
//! A target sample's uncertainty score `u` is the largest number of its k
//! nearest source neighbors that agree on a class. Samples with `u <= tau`
//! are declared unknown outright; the rest are provisionally known and must
//! additionally pass the delta filter, which rejects a candidate whose
//! inclusion inflates the dominant dispersion of its same-class neighbor set
//! by more than a fixed fraction of the class's own dispersion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dataset::FeatureSet;
use crate::membank::{knn_query, BankError, NeighborList};
use crate::rng::Rng;
use crate::subspace::{compute_covariance, fit_projector, SubspacePolicy, SubspaceProjector};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("neighbor list is empty")]
    NoNeighbors,
    #[error("neighbor label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("matrix is not symmetric within 1e-10")]
    NotSymmetric,
    #[error("eigensolver did not converge")]
    NoConvergence,
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("delta filter needs at least 2 same-class neighbors, got {0}")]
    TooFewNeighbors(usize),
    #[error("vector length {got} does not match dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k-th neighbor radius {0} is not positive")]
    ZeroRadius(f64),
    #[error("invalid diagnostics config: {0}")]
    BadDiagnostics(String),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Subspace(#[from] crate::subspace::SubspaceError),
}

/// Final call on a target sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Known,
    Unknown,
}

/// Everything the assessment stage learns about one target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyAssessment {
    /// Largest same-class count among the k nearest source neighbors.
    pub u: usize,
    /// Majority neighbor class; present only for a final Known verdict.
    pub pseudo_label: Option<usize>,
    /// Distance to the k-th nearest source neighbor.
    pub r_k: f64,
    /// Dispersion difference from the delta filter, 0 when the filter did
    /// not run.
    pub delta: f64,
    /// Reference dispersion of the same-class neighbor set, 0 when the
    /// filter did not run.
    pub lambda_max: f64,
    pub verdict: Verdict,
}

/// Maximum per-class count among `neighbor_labels` and the class attaining
/// it, ties resolved toward the smallest class id.
pub fn uncertainty_score(
    neighbor_labels: &[usize],
    num_classes: usize,
) -> Result<(usize, usize), UncertaintyError> {
    if neighbor_labels.is_empty() {
        return Err(UncertaintyError::NoNeighbors);
    }
    let mut counts = vec![0usize; num_classes];
    for &l in neighbor_labels {
        if l >= num_classes {
            return Err(UncertaintyError::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        counts[l] += 1;
    }
    let mut best_class = 0;
    let mut best = 0;
    for (class, &count) in counts.iter().enumerate() {
        if count > best {
            best = count;
            best_class = class;
        }
    }
    Ok((best, best_class))
}

/// Splits sample indices by score: index `i` is unknown iff
/// `scores[i] <= tau`.
pub fn partition(scores: &[usize], tau: usize) -> (Vec<usize>, Vec<usize>) {
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for (i, &u) in scores.iter().enumerate() {
        if u <= tau {
            unknown.push(i);
        } else {
            known.push(i);
        }
    }
    (known, unknown)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(s: &DMatrix<f64>) -> Result<f64, UncertaintyError> {
    if s.nrows() != s.ncols() {
        return Err(UncertaintyError::NotSquare {
            rows: s.nrows(),
            cols: s.ncols(),
        });
    }
    if (s - s.transpose()).abs().max() > 1e-10 {
        return Err(UncertaintyError::NotSymmetric);
    }
    let eig = nalgebra::SymmetricEigen::try_new(s.clone(), 1e-13, 10_000)
        .ok_or(UncertaintyError::NoConvergence)?;
    Ok(eig
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
}

/// Outcome of the spectral compactness test for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaOutcome {
    pub delta: f64,
    /// Top covariance eigenvalue of neighbors + extra source sample.
    pub lambda: f64,
    /// Top covariance eigenvalue of neighbors + candidate.
    pub lambda_hat: f64,
    pub keep: bool,
}

/// Acceptance rule of the uncertainty scheme: a clean known sample must
/// satisfy `delta <= 0.2 * lambda`.
pub const DELTA_KEEP_FACTOR: f64 = 0.2;

/// Compares the dominant dispersion of `same_class_neighbors` extended by a
/// same-class source sample against the same set extended by the candidate
/// `z`, in the coordinates the neighbors were found in.
pub fn delta_filter(
    z: &DVector<f64>,
    same_class_neighbors: &DMatrix<f64>,
    extra_source_sample: &DVector<f64>,
) -> Result<DeltaOutcome, UncertaintyError> {
    delta_filter_with_factor(
        z,
        same_class_neighbors,
        extra_source_sample,
        DELTA_KEEP_FACTOR,
    )
}

/// [`delta_filter`] with an explicit acceptance factor.
pub fn delta_filter_with_factor(
    z: &DVector<f64>,
    same_class_neighbors: &DMatrix<f64>,
    extra_source_sample: &DVector<f64>,
    factor: f64,
) -> Result<DeltaOutcome, UncertaintyError> {
    let n_prime = same_class_neighbors.nrows();
    let dim = same_class_neighbors.ncols();
    if n_prime < 2 {
        return Err(UncertaintyError::TooFewNeighbors(n_prime));
    }
    for v in [z, extra_source_sample] {
        if v.len() != dim {
            return Err(UncertaintyError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }

    let stack = |tail: &DVector<f64>| {
        let mut m = DMatrix::<f64>::zeros(n_prime + 1, dim);
        m.view_mut((0, 0), (n_prime, dim))
            .copy_from(same_class_neighbors);
        m.set_row(n_prime, &tail.transpose());
        m
    };

    let sigma = compute_covariance(&stack(extra_source_sample))?;
    let sigma_hat = compute_covariance(&stack(z))?;
    let lambda = max_eigenvalue(&sigma)?;
    let lambda_hat = max_eigenvalue(&sigma_hat)?;
    let delta = (lambda - lambda_hat).abs();
    Ok(DeltaOutcome {
        delta,
        lambda,
        lambda_hat,
        keep: delta <= factor * lambda,
    })
}

/// Immutable view of the bank for a batch of assessments: projected slots,
/// their labels, and a per-class index.
#[derive(Debug, Clone)]
pub struct BankSnapshot {
    projected: DMatrix<f64>,
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    num_classes: usize,
}

impl BankSnapshot {
    pub fn new(projected: DMatrix<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(projected.nrows(), labels.len());
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        BankSnapshot {
            projected,
            labels,
            by_class,
            num_classes,
        }
    }

    pub fn projected(&self) -> &DMatrix<f64> {
        &self.projected
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Knobs of the assessment stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssessParams {
    pub k: usize,
    pub tau: usize,
    /// Run the spectral filter on provisional-known samples.
    pub delta_filter: bool,
    pub delta_factor: f64,
    /// Seed for the per-sample extra-source draw.
    pub seed: u64,
    /// Extra salt mixed into per-sample streams, letting callers assessing
    /// many batches keep draws distinct across batches.
    #[serde(default)]
    pub salt: u64,
}

impl AssessParams {
    pub fn new(k: usize, tau: usize, seed: u64) -> Self {
        AssessParams {
            k,
            tau,
            delta_filter: true,
            delta_factor: DELTA_KEEP_FACTOR,
            seed,
            salt: 0,
        }
    }

    /// Default split threshold when none is configured: `ceil(k / 2)`.
    pub fn default_tau(k: usize) -> usize {
        k.div_ceil(2)
    }
}

fn assess_one(
    row: usize,
    targets: &DMatrix<f64>,
    snapshot: &BankSnapshot,
    params: &AssessParams,
    base_rng: &Rng,
) -> Result<UncertaintyAssessment, UncertaintyError> {
    let query = targets.row(row).transpose();
    let neighbors: NeighborList =
        knn_query(&snapshot.projected, &snapshot.labels, &query, params.k)?;
    let (u, majority) = uncertainty_score(&neighbors.labels, snapshot.num_classes)?;
    let r_k = neighbors.r_k();

    if u <= params.tau {
        return Ok(UncertaintyAssessment {
            u,
            pseudo_label: None,
            r_k,
            delta: 0.0,
            lambda_max: 0.0,
            verdict: Verdict::Unknown,
        });
    }

    let keep_known = |delta: f64, lambda: f64| UncertaintyAssessment {
        u,
        pseudo_label: Some(majority),
        r_k,
        delta,
        lambda_max: lambda,
        verdict: Verdict::Known,
    };

    if !params.delta_filter || u < 2 {
        return Ok(keep_known(0.0, 0.0));
    }

    let same_class: Vec<usize> = neighbors
        .indices
        .iter()
        .copied()
        .filter(|&i| snapshot.labels[i] == majority)
        .collect();
    let candidates: Vec<usize> = snapshot.by_class[majority]
        .iter()
        .copied()
        .filter(|i| !neighbors.indices.contains(i))
        .collect();
    if candidates.is_empty() {
        // no comparable source sample left in this class; keep the sample
        return Ok(keep_known(0.0, 0.0));
    }

    let mut rng = base_rng.derive(params.salt.wrapping_add(row as u64));
    let extra_idx = candidates[rng.next_below(candidates.len())];

    let dim = snapshot.projected.ncols();
    let mut neighbor_rows = DMatrix::<f64>::zeros(same_class.len(), dim);
    for (dst, &src) in same_class.iter().enumerate() {
        neighbor_rows.set_row(dst, &snapshot.projected.row(src));
    }
    let extra = snapshot.projected.row(extra_idx).transpose();
    let outcome = delta_filter_with_factor(&query, &neighbor_rows, &extra, params.delta_factor)?;

    Ok(UncertaintyAssessment {
        u,
        pseudo_label: outcome.keep.then_some(majority),
        r_k,
        delta: outcome.delta,
        lambda_max: outcome.lambda,
        verdict: if outcome.keep {
            Verdict::Known
        } else {
            Verdict::Unknown
        },
    })
}

/// Assesses every row of `targets_projected` against the bank snapshot.
///
/// Per-sample work is independent; with the `parallel` feature it fans out
/// across threads and collects in row order, so results are deterministic
/// either way.
pub fn assess_batch(
    targets_projected: &DMatrix<f64>,
    snapshot: &BankSnapshot,
    params: &AssessParams,
) -> Result<Vec<UncertaintyAssessment>, UncertaintyError> {
    if targets_projected.ncols() != snapshot.projected.ncols() {
        return Err(UncertaintyError::DimensionMismatch {
            expected: snapshot.projected.ncols(),
            got: targets_projected.ncols(),
        });
    }
    let base_rng = Rng::seeded(params.seed);
    let rows: Vec<usize> = (0..targets_projected.nrows()).collect();

    #[cfg(feature = "parallel")]
    {
        rows.par_iter()
            .map(|&row| assess_one(row, targets_projected, snapshot, params, &base_rng))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        rows.iter()
            .map(|&row| assess_one(row, targets_projected, snapshot, params, &base_rng))
            .collect()
    }
}

/// Coordinates for the assessment stage: raw features, or a subspace fitted
/// on the joint source + target set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssessSpace {
    Original,
    Subspace(SubspacePolicy),
}

/// Runs the whole assessment stage on a dataset pair: builds the bank
/// snapshot from the source features, optionally fits and applies the
/// subspace, and assesses every target sample.
///
/// Returns the fitted projector alongside the assessments so callers can
/// reuse it (it is `None` in original-space mode).
pub fn assess_dataset(
    source: &FeatureSet,
    target: &FeatureSet,
    space: AssessSpace,
    params: &AssessParams,
) -> Result<(Vec<UncertaintyAssessment>, Option<SubspaceProjector>), UncertaintyError> {
    let labels = source
        .labels()
        .ok_or(UncertaintyError::Bank(BankError::MissingLabels))?
        .to_vec();

    let (source_coords, target_coords, projector) = match space {
        AssessSpace::Original => (source.features().clone(), target.features().clone(), None),
        AssessSpace::Subspace(policy) => {
            let mut joint =
                DMatrix::<f64>::zeros(source.n() + target.n(), source.dim());
            joint
                .view_mut((0, 0), (source.n(), source.dim()))
                .copy_from(source.features());
            joint
                .view_mut((source.n(), 0), (target.n(), target.dim()))
                .copy_from(target.features());
            let projector = fit_projector(&joint, policy)?;
            (
                projector.project(source.features())?,
                projector.project(target.features())?,
                Some(projector),
            )
        }
    };

    let snapshot = BankSnapshot::new(source_coords, labels);
    let assessments = assess_batch(&target_coords, &snapshot, params)?;
    Ok((assessments, projector))
}

/// Fraction of targets whose unknown/known verdict matches the truth mask.
pub fn detection_accuracy(assessments: &[UncertaintyAssessment], truth_unknown: &[bool]) -> f64 {
    let correct = assessments
        .iter()
        .zip(truth_unknown)
        .filter(|(a, &unk)| (a.verdict == Verdict::Unknown) == unk)
        .count();
    correct as f64 / truth_unknown.len().max(1) as f64
}

/// Constants of the density/posterior diagnostics. These are validation
/// tooling only and never gate training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Density calibration constant.
    pub c0: f64,
    /// Indicator scale of the unknown-class density surrogate.
    pub c1: f64,
    /// Prior mass of the known classes.
    pub epsilon: f64,
    /// Density floor below which the unknown-class surrogate fires.
    pub beta: f64,
    /// Posterior threshold.
    pub gamma: f64,
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        if !(self.c0 > 0.0 && self.c1 > 0.0) {
            return Err(UncertaintyError::BadDiagnostics(
                "c0 and c1 must be positive".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(UncertaintyError::BadDiagnostics(
                "epsilon must lie in (0, 1)".into(),
            ));
        }
        if !(self.beta > 0.0) {
            return Err(UncertaintyError::BadDiagnostics(
                "beta must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(UncertaintyError::BadDiagnostics(
                "gamma must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// k-NN density estimate `c0 * k_i / (k * r_k^(m-1))` for one class.
pub fn density_estimate(
    k: usize,
    k_i: usize,
    r_k: f64,
    m: usize,
    c0: f64,
) -> Result<f64, UncertaintyError> {
    debug_assert!(k >= 1 && k_i <= k && m >= 2);
    if r_k <= 1e-12 {
        return Err(UncertaintyError::ZeroRadius(r_k));
    }
    Ok(c0 * k_i as f64 / (k as f64 * r_k.powi(m as i32 - 1)))
}

/// Three-way outcome of the posterior-threshold diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorIndicator {
    /// Premise held and `r_k^(m-1)` is under the posterior threshold: the
    /// unknown-class posterior is below gamma, so the sample leans known.
    BelowGamma,
    /// Premise held and the radius is large: posterior at or above gamma.
    NotBelowGamma,
    /// The density premise `c0 * k_max / (k * r_k^(m-1)) <= beta` failed;
    /// the surrogate assigns the unknown class zero mass and the threshold
    /// comparison does not apply.
    ConditionFailed,
}

/// Empirical posterior diagnostic for one target sample.
///
/// When the premise holds, the sample leans known iff
/// `r_k^(m-1) < epsilon * c0 * gamma / ((1 - gamma) * (1 - epsilon))`.
pub fn unknown_posterior_indicator(
    r_k: f64,
    k_max: usize,
    k: usize,
    m: usize,
    cfg: &DiagnosticsConfig,
) -> Result<PosteriorIndicator, UncertaintyError> {
    cfg.validate()?;
    let density = density_estimate(k, k_max, r_k, m, cfg.c0)?;
    if density > cfg.beta {
        return Ok(PosteriorIndicator::ConditionFailed);
    }
    if cfg.gamma >= 1.0 {
        return Ok(PosteriorIndicator::BelowGamma);
    }
    if cfg.gamma <= 0.0 {
        return Ok(PosteriorIndicator::NotBelowGamma);
    }
    let threshold = cfg.epsilon * cfg.c0 * cfg.gamma / ((1.0 - cfg.gamma) * (1.0 - cfg.epsilon));
    Ok(if r_k.powi(m as i32 - 1) < threshold {
        PosteriorIndicator::BelowGamma
    } else {
        PosteriorIndicator::NotBelowGamma
    })
}
