//! Per-source-sample feature slots with momentum updates, plus exact k-NN
//! queries over a projected snapshot of the bank.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataset::FeatureSet;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("source feature set has no labels")]
    MissingLabels,
    #[error("momentum alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("slot index {index} out of range for bank of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("k={k} exceeds bank size {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("feature has {got} dims, bank stores {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Fixed-size store of one unit-norm feature per source sample.
///
/// Slot count and labels are frozen at initialization; only the feature
/// content moves, through [`MemoryBank::update_slot`].
#[derive(Debug, Clone)]
pub struct MemoryBank {
    slots: DMatrix<f64>,
    labels: Vec<usize>,
    alpha: f64,
}

/// Builds a bank whose slots start as copies of the source features.
pub fn init_bank(source: &FeatureSet, alpha: f64) -> Result<MemoryBank, BankError> {
    let labels = source.labels().ok_or(BankError::MissingLabels)?.to_vec();
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BankError::BadAlpha(alpha));
    }
    Ok(MemoryBank {
        slots: source.features().clone(),
        labels,
        alpha,
    })
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.slots.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.ncols()
    }

    pub fn slots(&self) -> &DMatrix<f64> {
        &self.slots
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn slot(&self, index: usize) -> DVector<f64> {
        self.slots.row(index).transpose()
    }

    /// Momentum-mixes `feature` into the slot and renormalizes it, keeping
    /// the bank on the unit sphere.
    pub fn update_slot(&mut self, index: usize, feature: &DVector<f64>) -> Result<(), BankError> {
        if index >= self.len() {
            return Err(BankError::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        if feature.len() != self.dim() {
            return Err(BankError::DimensionMismatch {
                expected: self.dim(),
                got: feature.len(),
            });
        }
        let mixed = self.slot(index) * self.alpha + feature * (1.0 - self.alpha);
        let norm = mixed.norm();
        if norm < 1e-12 {
            // opposite unit vectors can cancel exactly; keep the old slot
            return Ok(());
        }
        let mixed = mixed / norm;
        self.slots.set_row(index, &mixed.transpose());
        Ok(())
    }
}

/// Result of a k-NN query: indices, distances, and labels aligned by rank.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub labels: Vec<usize>,
}

impl NeighborList {
    /// Distance to the k-th (furthest returned) neighbor.
    pub fn r_k(&self) -> f64 {
        *self.distances.last().expect("k >= 1")
    }
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    index: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // finite distances only; ties favor the lower index
        self.dist
            .partial_cmp(&other.dist)
            .unwrap()
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact k nearest neighbors of `query` among the rows of `bank_projected`,
/// by Euclidean distance, ties broken toward lower indices.
///
/// Uses a bounded max-heap over all rows, so the cost is `O(N log k)`.
pub fn knn_query(
    bank_projected: &DMatrix<f64>,
    labels: &[usize],
    query: &DVector<f64>,
    k: usize,
) -> Result<NeighborList, BankError> {
    let n = bank_projected.nrows();
    if k == 0 {
        return Err(BankError::ZeroK);
    }
    if k > n {
        return Err(BankError::KTooLarge { k, len: n });
    }
    if query.len() != bank_projected.ncols() {
        return Err(BankError::DimensionMismatch {
            expected: bank_projected.ncols(),
            got: query.len(),
        });
    }

    let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
    for i in 0..n {
        let mut d2 = 0.0;
        for j in 0..query.len() {
            let diff = bank_projected[(i, j)] - query[j];
            d2 += diff * diff;
        }
        let item = HeapItem { dist: d2, index: i };
        if heap.len() < k {
            heap.push(item);
        } else if item < *heap.peek().unwrap() {
            heap.pop();
            heap.push(item);
        }
    }

    let mut picked: Vec<HeapItem> = heap.into_vec();
    picked.sort();
    let indices: Vec<usize> = picked.iter().map(|h| h.index).collect();
    let distances: Vec<f64> = picked.iter().map(|h| h.dist.sqrt()).collect();
    let labels = indices.iter().map(|&i| labels[i]).collect();
    Ok(NeighborList {
        indices,
        distances,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::normalize_rows;
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    fn unit_bank(rng: &mut Rng, n: usize, m: usize) -> FeatureSet {
        let x = normalize_rows(&DMatrix::from_fn(n, m, |_, _| rng.next_gaussian())).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        FeatureSet::new(x, Some(labels)).unwrap()
    }

    #[test]
    fn init_copies_source_rows() {
        let mut rng = Rng::seeded(41);
        let source = unit_bank(&mut rng, 3, 4);
        let bank = init_bank(&source, 0.5).unwrap();
        assert_eq!(bank.slots(), source.features());
        assert_eq!(bank.labels(), source.labels().unwrap());
    }

    #[test]
    fn init_rejects_bad_alpha_and_missing_labels() {
        let mut rng = Rng::seeded(42);
        let source = unit_bank(&mut rng, 3, 4);
        assert!(matches!(
            init_bank(&source, 1.5),
            Err(BankError::BadAlpha(_))
        ));
        let unlabeled =
            FeatureSet::new(source.features().clone(), None).unwrap();
        assert!(matches!(
            init_bank(&unlabeled, 0.5),
            Err(BankError::MissingLabels)
        ));
    }

    #[test]
    fn every_source_row_is_its_own_nearest_neighbor() {
        let mut rng = Rng::seeded(43);
        let source = unit_bank(&mut rng, 12, 5);
        let bank = init_bank(&source, 0.5).unwrap();
        for i in 0..bank.len() {
            let out = knn_query(bank.slots(), bank.labels(), &bank.slot(i), 1).unwrap();
            assert_eq!(out.indices, vec![i]);
            assert!(out.distances[0] < 1e-12);
        }
    }

    #[test]
    fn momentum_extremes() {
        let mut rng = Rng::seeded(44);
        let source = unit_bank(&mut rng, 2, 3);
        let feature = DVector::from_vec(vec![0.0, 0.0, 1.0]);

        let mut keep = init_bank(&source, 1.0).unwrap();
        let before = keep.slot(0);
        keep.update_slot(0, &feature).unwrap();
        assert_relative_eq!((keep.slot(0) - before).norm(), 0.0, epsilon = 1e-12);

        let mut replace = init_bank(&source, 0.0).unwrap();
        replace.update_slot(0, &feature).unwrap();
        assert_relative_eq!((replace.slot(0) - feature).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_mix_renormalizes() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let source = FeatureSet::new(x, Some(vec![0])).unwrap();
        let mut bank = init_bank(&source, 0.5).unwrap();
        bank.update_slot(0, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        let s = bank.slot(0);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(s[0], inv_sqrt2, epsilon = 1e-12);
        assert_relative_eq!(s[1], inv_sqrt2, epsilon = 1e-12);
    }

    #[test]
    fn update_keeps_unit_norm() {
        let mut rng = Rng::seeded(45);
        let source = unit_bank(&mut rng, 8, 6);
        let mut bank = init_bank(&source, 0.7).unwrap();
        for i in 0..8 {
            let mut f = DVector::from_fn(6, |_, _| rng.next_gaussian());
            f /= f.norm();
            bank.update_slot(i, &f).unwrap();
            assert_relative_eq!(bank.slot(i).norm(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn out_of_range_slot_errors() {
        let mut rng = Rng::seeded(46);
        let source = unit_bank(&mut rng, 4, 3);
        let mut bank = init_bank(&source, 0.5).unwrap();
        let f = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            bank.update_slot(4, &f),
            Err(BankError::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn exact_query_hits_the_slot() {
        let mut rng = Rng::seeded(47);
        let source = unit_bank(&mut rng, 20, 4);
        let bank = init_bank(&source, 0.5).unwrap();
        let out = knn_query(bank.slots(), bank.labels(), &bank.slot(7), 1).unwrap();
        assert_eq!(out.indices, vec![7]);
        assert!(out.distances[0] < 1e-12);
        assert_eq!(out.labels, vec![bank.labels()[7]]);
    }

    #[test]
    fn k_equals_n_returns_everything_sorted() {
        let mut rng = Rng::seeded(48);
        let source = unit_bank(&mut rng, 10, 4);
        let bank = init_bank(&source, 0.5).unwrap();
        let q = DVector::from_fn(4, |_, _| rng.next_gaussian());
        let out = knn_query(bank.slots(), bank.labels(), &q, 10).unwrap();
        let mut sorted_indices: Vec<usize> = out.indices.clone();
        sorted_indices.sort_unstable();
        assert_eq!(sorted_indices, (0..10).collect::<Vec<_>>());
        assert!(out.distances.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = Rng::seeded(49);
        let source = unit_bank(&mut rng, 100, 6);
        let bank = init_bank(&source, 0.5).unwrap();
        for _ in 0..20 {
            let q = DVector::from_fn(6, |_, _| rng.next_gaussian());
            let got = knn_query(bank.slots(), bank.labels(), &q, 10).unwrap();

            let mut all: Vec<(f64, usize)> = (0..100)
                .map(|i| ((bank.slot(i) - &q).norm(), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all.iter().take(10).map(|&(_, i)| i).collect();
            assert_eq!(got.indices, expect);
        }
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // two identical rows at distance zero from the query
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let labels = vec![0, 1, 2];
        let q = DVector::from_vec(vec![1.0, 0.0]);
        let out = knn_query(&x, &labels, &q, 2).unwrap();
        assert_eq!(out.indices, vec![0, 1]);
    }

    #[test]
    fn k_too_large_errors() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let q = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            knn_query(&x, &[0, 1], &q, 3),
            Err(BankError::KTooLarge { k: 3, len: 2 })
        ));
    }

    #[test]
    fn query_invariant_under_orthogonal_transform() {
        let mut rng = Rng::seeded(50);
        let source = unit_bank(&mut rng, 30, 4);
        let bank = init_bank(&source, 0.5).unwrap();
        let q = DVector::from_fn(4, |_, _| rng.next_gaussian());
        let base = knn_query(bank.slots(), bank.labels(), &q, 5).unwrap();

        // Householder reflection: I - 2 v v^T for a random unit v
        let mut v = DVector::from_fn(4, |_, _| rng.next_gaussian());
        v /= v.norm();
        let h = DMatrix::identity(4, 4) - 2.0 * &v * v.transpose();
        let rotated_bank = bank.slots() * &h;
        let rotated_q = h.transpose() * &q;
        let rotated = knn_query(&rotated_bank, bank.labels(), &rotated_q, 5).unwrap();

        assert_eq!(base.indices, rotated.indices);
        for (a, b) in base.distances.iter().zip(rotated.distances.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }
}
