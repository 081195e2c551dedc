//! Inference-time unknown rejection, H-score metrics, and histogram exports.
//!
//! Prediction follows the entropy rule: a sample whose prediction entropy
//! reaches `log(C) / 2` is rejected as unknown (class id `C`), otherwise the
//! argmax class wins.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::CosineClassifier;
use crate::uncertainty::UncertaintyAssessment;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({predictions}) and truth ({truth}) differ in length")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("histogram needs at least 2 bins, got {0}")]
    BadBins(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Harmonic mean of common-class and unknown accuracy; 0 when both vanish.
pub fn h_score(a_com: f64, a_unk: f64) -> f64 {
    let denom = a_com + a_unk;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * a_com * a_unk / denom
    }
}

/// Shannon entropy in nats.
pub fn entropy(probs: &DVector<f64>) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Rejection threshold used at test time: `log(C) / 2`.
pub fn entropy_threshold(num_classes: usize) -> f64 {
    (num_classes as f64).ln() / 2.0
}

/// Applies the entropy rule to a probability vector; returns the class id,
/// or `probs.len()` for unknown.
pub fn predict_from_probs(probs: &DVector<f64>) -> usize {
    let c = probs.len();
    if entropy(probs) >= entropy_threshold(c) {
        c
    } else {
        probs.imax()
    }
}

/// Entropy-threshold inference with the cosine classifier (no margin).
pub fn predict(clf: &CosineClassifier, z: &DVector<f64>) -> usize {
    predict_from_probs(&clf.forward_probs(z, None))
}

/// Entropy-threshold inference on a raw linear head: softmax of `w z`
/// without row normalization or scaling. Used by the CE baseline.
pub fn predict_linear(w: &nalgebra::DMatrix<f64>, z: &DVector<f64>) -> usize {
    let logits = DVector::from_fn(w.nrows(), |j, _| w.row(j).dot(&z.transpose()));
    let max = logits.max();
    let exps: DVector<f64> = logits.map(|l| (l - max).exp());
    let probs = &exps / exps.sum();
    predict_from_probs(&probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub true_class: usize,
    pub predicted_class: usize,
    pub count: u64,
}

/// Accuracy summary of a labeled evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro average of per-class accuracy over common classes.
    pub a_com: f64,
    /// Fraction of true unknowns predicted unknown.
    pub a_unk: f64,
    /// Harmonic mean of the two.
    pub h: f64,
    pub per_class_acc: BTreeMap<usize, f64>,
    pub confusion: Vec<ConfusionCell>,
}

/// Scores `predictions` against true labels, where the unknown class is
/// coded `num_classes` on both sides.
///
/// Common-class accuracy is a macro average over the common classes present
/// in the truth, so class sizes do not weight it.
pub fn evaluate(
    predictions: &[usize],
    truth_labels: &[usize],
    num_classes: usize,
) -> Result<EvalReport, EvalError> {
    if predictions.len() != truth_labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth_labels.len(),
        });
    }

    let mut per_class: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    let mut confusion: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (&pred, &truth) in predictions.iter().zip(truth_labels) {
        let entry = per_class.entry(truth).or_insert((0, 0));
        entry.1 += 1;
        if pred == truth {
            entry.0 += 1;
        }
        *confusion.entry((truth, pred)).or_insert(0) += 1;
    }

    let mut per_class_acc = BTreeMap::new();
    let mut common_sum = 0.0;
    let mut common_classes = 0usize;
    let mut a_unk = 0.0;
    for (&class, &(correct, total)) in &per_class {
        let acc = correct as f64 / total as f64;
        per_class_acc.insert(class, acc);
        if class == num_classes {
            a_unk = acc;
        } else {
            common_sum += acc;
            common_classes += 1;
        }
    }
    let a_com = if common_classes > 0 {
        common_sum / common_classes as f64
    } else {
        0.0
    };

    Ok(EvalReport {
        a_com,
        a_unk,
        h: h_score(a_com, a_unk),
        per_class_acc,
        confusion: confusion
            .into_iter()
            .map(|((true_class, predicted_class), count)| ConfusionCell {
                true_class,
                predicted_class,
                count,
            })
            .collect(),
    })
}

fn histogram_rows(
    out: &mut impl Write,
    quantity: &str,
    values: &[f64],
    is_unknown: &[bool],
    bins: usize,
) -> Result<(), EvalError> {
    if values.is_empty() {
        return Ok(());
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hi = if max - min < 1e-12 { min + 1.0 } else { max };
    let width = (hi - min) / bins as f64;

    let mut known_counts = vec![0u64; bins];
    let mut unknown_counts = vec![0u64; bins];
    for (&v, &unk) in values.iter().zip(is_unknown) {
        let mut bin = ((v - min) / width) as usize;
        if bin >= bins {
            bin = bins - 1;
        }
        if unk {
            unknown_counts[bin] += 1;
        } else {
            known_counts[bin] += 1;
        }
    }
    for b in 0..bins {
        writeln!(
            out,
            "{},{},{},{},{}",
            quantity,
            min + b as f64 * width,
            min + (b + 1) as f64 * width,
            known_counts[b],
            unknown_counts[b]
        )?;
    }
    Ok(())
}

/// Writes per-quantity histograms (`r_k`, `u`, prediction entropy) split by
/// true known/unknown to a CSV file.
pub fn export_histograms(
    assessments: &[UncertaintyAssessment],
    probs: &[DVector<f64>],
    truth_unknown: &[bool],
    bins: usize,
    path: &Path,
) -> Result<(), EvalError> {
    if bins < 2 {
        return Err(EvalError::BadBins(bins));
    }
    if assessments.len() != truth_unknown.len() || probs.len() != truth_unknown.len() {
        return Err(EvalError::LengthMismatch {
            predictions: assessments.len().min(probs.len()),
            truth: truth_unknown.len(),
        });
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "quantity,bin_low,bin_high,count_known,count_unknown")?;

    let r_k: Vec<f64> = assessments.iter().map(|a| a.r_k).collect();
    let u: Vec<f64> = assessments.iter().map(|a| a.u as f64).collect();
    let entropies: Vec<f64> = probs.iter().map(entropy).collect();
    histogram_rows(&mut out, "r_k", &r_k, truth_unknown, bins)?;
    histogram_rows(&mut out, "u", &u, truth_unknown, bins)?;
    histogram_rows(&mut out, "entropy", &entropies, truth_unknown, bins)?;
    out.flush()?;
    Ok(())
}
