//! Cosine linear classifier and the training losses with their analytic
//! gradients.
//!
//! The classifier keeps one weight row per class; rows are normalized inside
//! every forward pass, and gradients with respect to the stored
//! (pre-normalization) weights chain through that normalization. Feature
//! gradients are computed as well so a trainable encoder can be attached
//! later; the fixed-embedding trainer ignores them.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("classifier needs at least one class and one dimension")]
    EmptyClassifier,
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
    #[error("margin multiplier must be non-negative, got {0}")]
    BadMargin(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("feature has {got} dims, classifier expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch has {features} feature rows but {labels} labels")]
    BatchMismatch { features: usize, labels: usize },
    #[error("anchor {0} has no positive sample in the bank")]
    NoPositives(usize),
}

/// Linear classifier over unit-norm features with row-normalized weights,
/// a logit scale `s`, and the margin multiplier applied to the adaptive
/// margin term.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    w: DMatrix<f64>,
    s: f64,
    margin_alpha: f64,
}

/// Margin request for a forward pass: add `s * margin_alpha * mu` to this
/// class's logit.
#[derive(Debug, Clone, Copy)]
pub struct Margin {
    pub class: usize,
    pub mu: f64,
}

impl CosineClassifier {
    pub fn new(w: DMatrix<f64>, s: f64, margin_alpha: f64) -> Result<Self, LossError> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(LossError::EmptyClassifier);
        }
        if !(s > 0.0) {
            return Err(LossError::BadScale(s));
        }
        if margin_alpha < 0.0 {
            return Err(LossError::BadMargin(margin_alpha));
        }
        Ok(CosineClassifier { w, s, margin_alpha })
    }

    /// Random unit rows drawn from the seeded generator.
    pub fn init_random(
        classes: usize,
        dim: usize,
        s: f64,
        margin_alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self, LossError> {
        let mut w = DMatrix::<f64>::zeros(classes, dim);
        for i in 0..classes {
            let mut row = vec![0.0; dim];
            rng.fill_gaussian(&mut row);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (j, v) in row.iter().enumerate() {
                w[(i, j)] = v / norm;
            }
        }
        CosineClassifier::new(w, s, margin_alpha)
    }

    pub fn num_classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn margin_alpha(&self) -> f64 {
        self.margin_alpha
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w
    }

    /// Rescales every weight row to unit norm.
    pub fn renormalize_rows(&mut self) {
        for i in 0..self.w.nrows() {
            let norm = self.w.row(i).norm();
            if norm > 1e-12 {
                for j in 0..self.w.ncols() {
                    self.w[(i, j)] /= norm;
                }
            }
        }
    }

    /// Softmax over `s * w_hat_j . z`, with the margin boost added to the
    /// designated class when requested.
    pub fn forward_probs(&self, z: &DVector<f64>, margin: Option<Margin>) -> DVector<f64> {
        let logits = self.logits(z, margin);
        softmax(&logits)
    }

    fn logits(&self, z: &DVector<f64>, margin: Option<Margin>) -> DVector<f64> {
        debug_assert_eq!(z.len(), self.dim());
        let mut logits = DVector::<f64>::zeros(self.num_classes());
        for j in 0..self.num_classes() {
            let row = self.w.row(j);
            let norm = row.norm().max(1e-300);
            logits[j] = self.s * row.dot(&z.transpose()) / norm;
        }
        if let Some(m) = margin {
            logits[m.class] += self.s * self.margin_alpha * m.mu;
        }
        logits
    }
}

fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exps: DVector<f64> = logits.map(|l| (l - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Loss value plus gradients for the classifier weights (pre-normalization)
/// and the input features of the batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub w_grad: DMatrix<f64>,
    pub feature_grads: DMatrix<f64>,
}

impl LossOutput {
    fn zero(clf: &CosineClassifier, batch: usize) -> Self {
        LossOutput {
            loss: 0.0,
            w_grad: DMatrix::zeros(clf.num_classes(), clf.dim()),
            feature_grads: DMatrix::zeros(batch, clf.dim()),
        }
    }
}

/// Mean excess confidence of the discovered unknowns:
/// `mean(max(0, max_j p_j - 1/2))`, which is the adaptive margin.
pub fn compute_margin_mu(unknown_probs: &[DVector<f64>]) -> f64 {
    if unknown_probs.is_empty() {
        return 0.0;
    }
    let sum: f64 = unknown_probs
        .iter()
        .map(|p| (p.max() - 0.5).max(0.0))
        .sum();
    sum / unknown_probs.len() as f64
}

fn check_batch(
    clf: &CosineClassifier,
    feats: &DMatrix<f64>,
    labels: Option<&[usize]>,
) -> Result<(), LossError> {
    if feats.ncols() != clf.dim() {
        return Err(LossError::DimensionMismatch {
            expected: clf.dim(),
            got: feats.ncols(),
        });
    }
    if let Some(labels) = labels {
        if labels.len() != feats.nrows() {
            return Err(LossError::BatchMismatch {
                features: feats.nrows(),
                labels: labels.len(),
            });
        }
        for &l in labels {
            if l >= clf.num_classes() {
                return Err(LossError::LabelOutOfRange {
                    label: l,
                    classes: clf.num_classes(),
                });
            }
        }
    }
    Ok(())
}

/// Shared backward pass for the cosine-logit losses.
///
/// `dl` maps a sample's probability vector and row index to the gradient of
/// the total loss with respect to that sample's logits.
fn cosine_backward(
    clf: &CosineClassifier,
    feats: &DMatrix<f64>,
    margin_for: impl Fn(usize) -> Option<Margin>,
    dl: impl Fn(usize, &DVector<f64>) -> DVector<f64>,
    loss_of: impl Fn(usize, &DVector<f64>) -> f64,
) -> LossOutput {
    let (c, d) = (clf.num_classes(), clf.dim());
    let n = feats.nrows();
    let mut w_hat = clf.w.clone();
    let mut w_norms = vec![0.0; c];
    for j in 0..c {
        let norm = clf.w.row(j).norm().max(1e-300);
        w_norms[j] = norm;
        for t in 0..d {
            w_hat[(j, t)] /= norm;
        }
    }

    let mut loss = 0.0;
    let mut grad_w_hat = DMatrix::<f64>::zeros(c, d);
    let mut feature_grads = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let z = feats.row(i).transpose();
        let mut logits = DVector::<f64>::zeros(c);
        for j in 0..c {
            logits[j] = clf.s * w_hat.row(j).dot(&z.transpose());
        }
        if let Some(m) = margin_for(i) {
            logits[m.class] += clf.s * clf.margin_alpha * m.mu;
        }
        let p = softmax(&logits);
        loss += loss_of(i, &p);
        let g = dl(i, &p);
        for j in 0..c {
            let gj = clf.s * g[j];
            for t in 0..d {
                grad_w_hat[(j, t)] += gj * z[t];
                feature_grads[(i, t)] += gj * w_hat[(j, t)];
            }
        }
    }

    // chain through row normalization: dw = (I - w_hat w_hat^T) dw_hat / |w|
    let mut w_grad = DMatrix::<f64>::zeros(c, d);
    for j in 0..c {
        let gj = grad_w_hat.row(j).transpose();
        let wj = w_hat.row(j).transpose();
        let radial = wj.dot(&gj);
        for t in 0..d {
            w_grad[(j, t)] = (gj[t] - radial * wj[t]) / w_norms[j];
        }
    }

    LossOutput {
        loss,
        w_grad,
        feature_grads,
    }
}

/// Margin softmax loss over a labeled batch: cross-entropy on scaled cosine
/// logits with `s * margin_alpha * mu` added to each sample's true-class
/// logit. An empty batch contributes nothing.
pub fn ugm_loss_and_grad(
    clf: &CosineClassifier,
    feats: &DMatrix<f64>,
    labels: &[usize],
    mu: f64,
) -> Result<LossOutput, LossError> {
    check_batch(clf, feats, Some(labels))?;
    let n = feats.nrows();
    if n == 0 {
        return Ok(LossOutput::zero(clf, 0));
    }
    let inv = 1.0 / n as f64;
    Ok(cosine_backward(
        clf,
        feats,
        |i| {
            Some(Margin {
                class: labels[i],
                mu,
            })
        },
        |i, p| {
            let mut g = p.clone() * inv;
            g[labels[i]] -= inv;
            g
        },
        |i, p| -inv * p[labels[i]].max(1e-300).ln(),
    ))
}

/// Entropy-raising loss for the discovered unknowns:
/// `-(1 / (2 |set|)) * sum_z sum_j log p_j(z) - log C`.
///
/// The uniform prediction minimizes it; the minimum is 0 for C = 2 and
/// `(C/2 - 1) log C` in general.
pub fn unknown_loss_and_grad(
    clf: &CosineClassifier,
    feats: &DMatrix<f64>,
) -> Result<LossOutput, LossError> {
    check_batch(clf, feats, None)?;
    let b = feats.nrows();
    if b == 0 {
        return Ok(LossOutput::zero(clf, 0));
    }
    let c = clf.num_classes() as f64;
    let scale = -1.0 / (2.0 * b as f64);
    let mut out = cosine_backward(
        clf,
        feats,
        |_| None,
        |_, p| {
            // d/dl_k of sum_j log p_j = 1 - C p_k
            p.map(|pk| scale * (1.0 - c * pk))
        },
        |_, p| scale * p.iter().map(|&pk| pk.max(1e-300).ln()).sum::<f64>(),
    );
    out.loss -= c.ln();
    Ok(out)
}

/// Plain softmax cross-entropy on raw (unnormalized, unscaled) logits
/// `w_j . z`; the baseline training path.
pub fn ce_loss_and_grad(
    clf: &CosineClassifier,
    feats: &DMatrix<f64>,
    labels: &[usize],
) -> Result<LossOutput, LossError> {
    check_batch(clf, feats, Some(labels))?;
    let (c, d) = (clf.num_classes(), clf.dim());
    let n = feats.nrows();
    if n == 0 {
        return Ok(LossOutput::zero(clf, 0));
    }
    let inv = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut w_grad = DMatrix::<f64>::zeros(c, d);
    let mut feature_grads = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let z = feats.row(i).transpose();
        let logits = DVector::from_fn(c, |j, _| clf.w.row(j).dot(&z.transpose()));
        let p = softmax(&logits);
        loss -= inv * p[labels[i]].max(1e-300).ln();
        for j in 0..c {
            let g = inv * (p[j] - f64::from(j == labels[i]));
            for t in 0..d {
                w_grad[(j, t)] += g * z[t];
                feature_grads[(i, t)] += g * clf.w[(j, t)];
            }
        }
    }
    Ok(LossOutput {
        loss,
        w_grad,
        feature_grads,
    })
}

/// Supervised contrastive loss of anchors against bank entries.
///
/// Positives are same-label bank slots (minus the anchor's own slot when
/// `exclude` names it); every other slot is a negative. Bank entries are
/// constants, so only anchor gradients are returned.
pub fn supcon_loss_and_grad(
    anchors: &DMatrix<f64>,
    anchor_labels: &[usize],
    bank_feats: &DMatrix<f64>,
    bank_labels: &[usize],
    temperature: f64,
    exclude: Option<&[usize]>,
) -> Result<(f64, DMatrix<f64>), LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::BadTemperature(temperature));
    }
    if anchors.nrows() != anchor_labels.len() {
        return Err(LossError::BatchMismatch {
            features: anchors.nrows(),
            labels: anchor_labels.len(),
        });
    }
    if anchors.ncols() != bank_feats.ncols() {
        return Err(LossError::DimensionMismatch {
            expected: bank_feats.ncols(),
            got: anchors.ncols(),
        });
    }
    let n = anchors.nrows();
    let bank_n = bank_feats.nrows();
    let d = anchors.ncols();
    let mut loss = 0.0;
    let mut grads = DMatrix::<f64>::zeros(n, d);

    for i in 0..n {
        let skip = exclude.map(|e| e[i]);
        let z = anchors.row(i).transpose();
        let mut sims = Vec::with_capacity(bank_n);
        let mut ids = Vec::with_capacity(bank_n);
        let mut positives = Vec::new();
        for j in 0..bank_n {
            if skip == Some(j) {
                continue;
            }
            let sim = bank_feats.row(j).dot(&z.transpose()) / temperature;
            if bank_labels[j] == anchor_labels[i] {
                positives.push(ids.len());
            }
            ids.push(j);
            sims.push(sim);
        }
        if positives.is_empty() {
            return Err(LossError::NoPositives(i));
        }

        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = sims.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let mean_pos_sim: f64 =
            positives.iter().map(|&p| sims[p]).sum::<f64>() / positives.len() as f64;
        loss += lse - mean_pos_sim;

        // grad_z = (1/t) (sum_j q_j m_j - mean_{p in P} m_p)
        let inv_t = 1.0 / temperature;
        let inv_pos = 1.0 / positives.len() as f64;
        for (slot, &j) in ids.iter().enumerate() {
            let q = (sims[slot] - max).exp() / sum_exp;
            for t in 0..d {
                grads[(i, t)] += inv_t * q * bank_feats[(j, t)];
            }
        }
        for &p in &positives {
            let j = ids[p];
            for t in 0..d {
                grads[(i, t)] -= inv_t * inv_pos * bank_feats[(j, t)];
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    Ok((loss * inv_n, grads * inv_n))
}

/// Combined per-step report: individual terms, the weighted total, and the
/// summed classifier gradient. Feature gradients stay on the per-term
/// outputs since each term sees a different sample set.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_ugm: f64,
    pub l_unk: f64,
    pub l_sup: f64,
    pub l_total: f64,
    pub mu: f64,
    pub w_grad: DMatrix<f64>,
}

/// `l_total = l_ugm + lambda * l_unk + l_sup`, with the classifier gradients
/// combined under the same weights. The contrastive term touches only
/// features, so it contributes no classifier gradient.
pub fn total_loss(
    ugm: &LossOutput,
    unk: &LossOutput,
    l_sup: f64,
    mu: f64,
    lambda: f64,
) -> LossReport {
    LossReport {
        l_ugm: ugm.loss,
        l_unk: unk.loss,
        l_sup,
        l_total: ugm.loss + lambda * unk.loss + l_sup,
        mu,
        w_grad: &ugm.w_grad + &unk.w_grad * lambda,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_clf(c: usize, d: usize, s: f64, seed: u64) -> CosineClassifier {
        let mut rng = Rng::seeded(seed);
        CosineClassifier::init_random(c, d, s, 1.0, &mut rng).unwrap()
    }

    fn random_unit_rows(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = Rng::seeded(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.next_gaussian());
        crate::dataset::normalize_rows(&x).unwrap()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let denom = a.norm().max(b.norm()).max(1e-12);
        (a - b).norm() / denom
    }

    /// Central finite differences over every entry of `w`.
    fn fd_grad(f: impl Fn(&DMatrix<f64>) -> f64, w: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        let mut g = DMatrix::<f64>::zeros(w.nrows(), w.ncols());
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                let mut plus = w.clone();
                plus[(i, j)] += h;
                let mut minus = w.clone();
                minus[(i, j)] -= h;
                g[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn orthogonal_rows_give_even_probs() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let clf = CosineClassifier::new(w, 16.0, 1.0).unwrap();
        let z = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let p = clf.forward_probs(&z, None);
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_margin_matches_plain_scaled_softmax() {
        let clf = random_clf(4, 6, 16.0, 70);
        let z = random_unit_rows(1, 6, 71).row(0).transpose();
        let with = clf.forward_probs(&z, Some(Margin { class: 2, mu: 0.0 }));
        let without = clf.forward_probs(&z, None);
        assert!((with - without).abs().max() < 1e-15);
    }

    #[test]
    fn probs_sum_to_one() {
        let clf = random_clf(7, 5, 16.0, 72);
        for seed in 0..5 {
            let z = random_unit_rows(1, 5, 73 + seed).row(0).transpose();
            let p = clf.forward_probs(&z, None);
            assert_relative_eq!(p.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn argmax_is_shift_invariant() {
        // adding a constant to every logit cannot move the argmax
        let clf = random_clf(5, 4, 16.0, 74);
        let z = random_unit_rows(1, 4, 75).row(0).transpose();
        let p = clf.forward_probs(&z, None);
        let logits = DVector::from_fn(5, |j, _| {
            clf.weights().row(j).dot(&z.transpose()) / clf.weights().row(j).norm()
        });
        assert_eq!(p.imax(), logits.imax());
    }

    #[test]
    fn margin_mu_plugins() {
        let mk = |max: f64| {
            // 3-class vector whose largest entry is the requested max
            DVector::from_vec(vec![max, (1.0 - max) / 2.0, (1.0 - max) / 2.0])
        };
        assert_relative_eq!(
            compute_margin_mu(&[mk(0.9), mk(0.4)]),
            0.2,
            epsilon = 1e-12
        );
        assert_eq!(compute_margin_mu(&[mk(0.5), mk(0.4)]), 0.0);
        assert_relative_eq!(compute_margin_mu(&[mk(1.0), mk(1.0)]), 0.5, epsilon = 1e-12);
        assert_eq!(compute_margin_mu(&[]), 0.0);
    }

    #[test]
    fn margin_mu_is_monotone() {
        let a = vec![
            DVector::from_vec(vec![0.8, 0.2]),
            DVector::from_vec(vec![0.7, 0.3]),
        ];
        let b = vec![
            DVector::from_vec(vec![0.7, 0.3]),
            DVector::from_vec(vec![0.6, 0.4]),
        ];
        assert!(compute_margin_mu(&b) <= compute_margin_mu(&a));
    }

    #[test]
    fn ugm_with_zero_margin_is_cosine_cross_entropy() {
        let clf = random_clf(5, 8, 1.0, 76);
        let feats = random_unit_rows(6, 8, 77);
        let labels = vec![0, 1, 2, 3, 4, 0];
        let out = ugm_loss_and_grad(&clf, &feats, &labels, 0.0).unwrap();

        // independent plain cross-entropy over cosine logits
        let mut expect = 0.0;
        for i in 0..6 {
            let z = feats.row(i).transpose();
            let logits = DVector::from_fn(5, |j, _| {
                clf.weights().row(j).dot(&z.transpose()) / clf.weights().row(j).norm()
            });
            let p = softmax(&logits);
            expect -= p[labels[i]].ln() / 6.0;
        }
        assert_relative_eq!(out.loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn raising_the_margin_never_raises_the_loss() {
        let clf = random_clf(4, 5, 16.0, 78);
        let feats = random_unit_rows(5, 5, 79);
        let labels = vec![0, 1, 2, 3, 0];
        let mut last = f64::INFINITY;
        for mu in [0.0, 0.1, 0.2, 0.3, 0.5] {
            let out = ugm_loss_and_grad(&clf, &feats, &labels, mu).unwrap();
            assert!(out.loss <= last + 1e-12);
            last = out.loss;
        }
    }

    #[test]
    fn ugm_gradients_match_finite_differences() {
        for (c, d, seed) in [(2, 4, 80), (5, 8, 81), (10, 16, 82)] {
            let clf = random_clf(c, d, 16.0, seed);
            let feats = random_unit_rows(4, d, seed + 100);
            let labels: Vec<usize> = (0..4).map(|i| i % c).collect();
            let mu = 0.17;
            let out = ugm_loss_and_grad(&clf, &feats, &labels, mu).unwrap();

            let fd_w = fd_grad(
                |w| {
                    let c2 = CosineClassifier::new(w.clone(), clf.s(), clf.margin_alpha()).unwrap();
                    ugm_loss_and_grad(&c2, &feats, &labels, mu).unwrap().loss
                },
                clf.weights(),
                1e-5,
            );
            assert!(rel_err(&out.w_grad, &fd_w) <= 1e-4, "w rel err too big");

            let fd_f = fd_grad(
                |f| ugm_loss_and_grad(&clf, f, &labels, mu).unwrap().loss,
                &feats,
                1e-5,
            );
            assert!(rel_err(&out.feature_grads, &fd_f) <= 1e-4);
        }
    }

    #[test]
    fn unknown_loss_is_zero_for_two_class_uniform() {
        // rows orthogonal to z give probs [0.5, 0.5]
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let clf = CosineClassifier::new(w, 16.0, 1.0).unwrap();
        let feats = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
        let out = unknown_loss_and_grad(&clf, &feats).unwrap();
        assert_relative_eq!(out.loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unknown_loss_blows_up_on_confident_predictions() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let clf = CosineClassifier::new(w, 60.0, 1.0).unwrap();
        let feats = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = unknown_loss_and_grad(&clf, &feats).unwrap();
        assert!(out.loss > 10.0, "loss {} should be large", out.loss);
    }

    #[test]
    fn unknown_loss_empty_set_is_zero() {
        let clf = random_clf(3, 4, 16.0, 83);
        let feats = DMatrix::<f64>::zeros(0, 4);
        let out = unknown_loss_and_grad(&clf, &feats).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.w_grad.abs().max(), 0.0);
    }

    #[test]
    fn unknown_loss_gradients_match_finite_differences() {
        for (c, d, seed) in [(2, 4, 84), (5, 8, 85), (10, 16, 86)] {
            let clf = random_clf(c, d, 16.0, seed);
            let feats = random_unit_rows(3, d, seed + 100);
            let out = unknown_loss_and_grad(&clf, &feats).unwrap();
            let fd_w = fd_grad(
                |w| {
                    let c2 = CosineClassifier::new(w.clone(), clf.s(), clf.margin_alpha()).unwrap();
                    unknown_loss_and_grad(&c2, &feats).unwrap().loss
                },
                clf.weights(),
                1e-5,
            );
            assert!(rel_err(&out.w_grad, &fd_w) <= 1e-4);
            let fd_f = fd_grad(
                |f| unknown_loss_and_grad(&clf, f).unwrap().loss,
                &feats,
                1e-5,
            );
            assert!(rel_err(&out.feature_grads, &fd_f) <= 1e-4);
        }
    }

    #[test]
    fn minimizing_unknown_loss_raises_entropy() {
        let mut clf = random_clf(4, 6, 8.0, 87);
        let feats = random_unit_rows(1, 6, 88);
        let entropy = |clf: &CosineClassifier| {
            let p = clf.forward_probs(&feats.row(0).transpose(), None);
            -p.iter().map(|&x| x * x.max(1e-300).ln()).sum::<f64>()
        };
        let mut last = entropy(&clf);
        for _ in 0..200 {
            let out = unknown_loss_and_grad(&clf, &feats).unwrap();
            let w = clf.weights() - out.w_grad * 0.02;
            clf = CosineClassifier::new(w, clf.s(), clf.margin_alpha()).unwrap();
            let e = entropy(&clf);
            assert!(e >= last - 1e-9, "entropy decreased: {last} -> {e}");
            last = e;
        }
        // and it actually approaches the uniform maximum
        assert!(last > 0.95 * (4.0f64).ln(), "final entropy {last}");
    }

    #[test]
    fn uniform_prediction_minimizes_the_unknown_objective() {
        // direct check of the per-sample formula over the simplex
        let c = 5;
        let objective = |p: &[f64]| {
            -0.5 * p.iter().map(|&x| x.ln()).sum::<f64>() - (c as f64).ln()
        };
        let uniform = vec![1.0 / c as f64; c];
        let best = objective(&uniform);
        let mut rng = Rng::seeded(89);
        for _ in 0..100 {
            let mut p: Vec<f64> = (0..c).map(|_| rng.next_unit() + 1e-3).collect();
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= sum);
            assert!(objective(&p) >= best - 1e-12);
        }
    }

    #[test]
    fn ce_uniform_logits_cost_log_c() {
        let w = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0],
        );
        let clf = CosineClassifier::new(w, 16.0, 1.0).unwrap();
        let feats = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
        let out = ce_loss_and_grad(&clf, &feats, &[1]).unwrap();
        assert_relative_eq!(out.loss, (4.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_goes_to_zero_with_a_dominant_true_logit() {
        // raw logits, so a long weight row drives the loss to zero
        let w = DMatrix::from_row_slice(2, 2, &[60.0, 0.0, 0.0, 1.0]);
        let clf = CosineClassifier::new(w, 16.0, 1.0).unwrap();
        let feats = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = ce_loss_and_grad(&clf, &feats, &[0]).unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        for (c, d, seed) in [(2, 4, 90), (5, 8, 91), (10, 16, 92)] {
            let clf = random_clf(c, d, 16.0, seed);
            let feats = random_unit_rows(4, d, seed + 100);
            let labels: Vec<usize> = (0..4).map(|i| (i * 2) % c).collect();
            let out = ce_loss_and_grad(&clf, &feats, &labels).unwrap();
            let fd_w = fd_grad(
                |w| {
                    let c2 = CosineClassifier::new(w.clone(), clf.s(), clf.margin_alpha()).unwrap();
                    ce_loss_and_grad(&c2, &feats, &labels).unwrap().loss
                },
                clf.weights(),
                1e-5,
            );
            assert!(rel_err(&out.w_grad, &fd_w) <= 1e-4);
            let fd_f = fd_grad(
                |f| ce_loss_and_grad(&clf, f, &labels).unwrap().loss,
                &feats,
                1e-5,
            );
            assert!(rel_err(&out.feature_grads, &fd_f) <= 1e-4);
        }
    }

    #[test]
    fn supcon_identical_positive_dominates_at_small_temperature() {
        let anchor = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let bank = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (loss, _) =
            supcon_loss_and_grad(&anchor, &[0], &bank, &[0, 1, 2], 0.01, None).unwrap();
        assert!(loss.abs() < 1e-10, "loss {loss}");
    }

    #[test]
    fn supcon_orthogonal_pair_costs_log_two() {
        let anchor = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let bank = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (loss, _) = supcon_loss_and_grad(&anchor, &[0], &bank, &[0, 1], 0.05, None).unwrap();
        assert_relative_eq!(loss, (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn supcon_errors_without_positives() {
        let anchor = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let bank = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(matches!(
            supcon_loss_and_grad(&anchor, &[0], &bank, &[1], 0.05, None),
            Err(LossError::NoPositives(0))
        ));
    }

    #[test]
    fn supcon_gradients_match_finite_differences() {
        for (d, seed) in [(4, 93), (8, 94), (16, 95)] {
            let anchors = random_unit_rows(3, d, seed);
            let labels = vec![0, 1, 0];
            let bank = random_unit_rows(10, d, seed + 10);
            let bank_labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
            let (_, grads) =
                supcon_loss_and_grad(&anchors, &labels, &bank, &bank_labels, 0.3, None).unwrap();
            let fd = fd_grad(
                |a| {
                    supcon_loss_and_grad(a, &labels, &bank, &bank_labels, 0.3, None)
                        .unwrap()
                        .0
                },
                &anchors,
                1e-5,
            );
            assert!(rel_err(&grads, &fd) <= 1e-4);
        }
    }

    #[test]
    fn total_combines_terms_with_lambda() {
        let clf = random_clf(3, 4, 16.0, 96);
        let mut ugm = LossOutput::zero(&clf, 0);
        ugm.loss = 1.0;
        let mut unk = LossOutput::zero(&clf, 0);
        unk.loss = 2.0;

        let report = total_loss(&ugm, &unk, 0.5, 0.1, 0.1);
        assert_relative_eq!(report.l_total, 1.7, epsilon = 1e-12);

        let report = total_loss(&ugm, &unk, 0.5, 0.1, 0.0);
        assert_relative_eq!(report.l_total, 1.5, epsilon = 1e-12);

        let zero = total_loss(
            &LossOutput::zero(&clf, 0),
            &LossOutput::zero(&clf, 0),
            0.0,
            0.0,
            0.3,
        );
        assert_eq!(zero.l_total, 0.0);
    }

    #[test]
    fn total_weights_the_w_gradients() {
        let clf = random_clf(3, 4, 16.0, 97);
        let feats = random_unit_rows(2, 4, 98);
        let ugm = ugm_loss_and_grad(&clf, &feats, &[0, 1], 0.0).unwrap();
        let unk = unknown_loss_and_grad(&clf, &feats).unwrap();
        let report = total_loss(&ugm, &unk, 0.0, 0.0, 0.25);
        let expect = &ugm.w_grad + &unk.w_grad * 0.25;
        assert!((report.w_grad - expect).abs().max() < 1e-15);
        assert_relative_eq!(
            report.l_total,
            ugm.loss + 0.25 * unk.loss,
            epsilon = 1e-10
        );
    }
}
