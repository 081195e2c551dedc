//! End-to-end training loop: batch sampling, bank updates, subspace refits,
//! target assessment, loss assembly, and Nesterov SGD with an inverse decay
//! schedule.
//!
//! Features are fixed embeddings here, so feature gradients from the losses
//! are computed but not applied; only the classifier trains. Seed handling
//! is documented on [`run_training`] so ablation references can replay the
//! exact batch order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, FeatureSet, ScenarioTruth};
use crate::eval::{self, EvalError};
use crate::losses::{
    ce_loss_and_grad, compute_margin_mu, supcon_loss_and_grad, total_loss, ugm_loss_and_grad,
    unknown_loss_and_grad, CosineClassifier, LossError,
};
use crate::membank::{init_bank, BankError, MemoryBank};
use crate::rng::Rng;
use crate::subspace::{fit_projector, SubspaceError, SubspacePolicy, SubspaceProjector};
use crate::uncertainty::{
    assess_batch, detection_accuracy, AssessParams, BankSnapshot, UncertaintyError, Verdict,
    DELTA_KEEP_FACTOR,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("source has dimension {source_dim} but target has {target_dim}")]
    DimensionMismatch {
        source_dim: usize,
        target_dim: usize,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which objective drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Margin + unknown + contrastive objective with target assessment.
    #[default]
    Full,
    /// Source-only cross-entropy on a raw linear head; the comparison
    /// baseline. Weight rows are left unnormalized so the head is free to
    /// sharpen, which is exactly the overconfidence the full objective is
    /// designed to avoid.
    CeBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr_classifier: f64,
    /// Learning rate an attached encoder would use; unused on fixed
    /// embeddings but kept so configs carry the full optimizer story.
    pub lr_features: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k: usize,
    /// Known/unknown split threshold; `ceil(k/2)` when absent.
    pub tau: Option<usize>,
    pub lambda: f64,
    pub temperature: f64,
    pub bank_alpha: f64,
    pub s: f64,
    pub margin_alpha: f64,
    pub subspace: SubspacePolicy,
    /// Refit the projector every this many epochs.
    pub refit_every: usize,
    /// Refit on every batch instead (bank plus the current target batch).
    pub refit_per_batch: bool,
    pub seed: u64,
    // ablation switches
    pub delta_filter: bool,
    pub delta_factor: f64,
    pub use_pseudo_targets: bool,
    pub force_zero_margin: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Full,
            lr_classifier: 0.01,
            lr_features: 0.001,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 36,
            epochs: 10,
            k: 10,
            tau: None,
            lambda: 0.1,
            temperature: 0.05,
            bank_alpha: 0.5,
            s: 16.0,
            margin_alpha: 1.0,
            subspace: SubspacePolicy::Energy(0.9),
            refit_every: 1,
            refit_per_batch: false,
            seed: 0,
            delta_filter: true,
            delta_factor: DELTA_KEEP_FACTOR,
            use_pseudo_targets: true,
            force_zero_margin: false,
        }
    }
}

impl TrainConfig {
    pub fn tau_or_default(&self) -> usize {
        self.tau.unwrap_or_else(|| AssessParams::default_tau(self.k))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::BadConfig(msg.into()));
        if !(self.lr_classifier > 0.0 && self.lr_features > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.k == 0 {
            return bad("batch_size, epochs, and k must be positive");
        }
        if self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.bank_alpha) {
            return bad("bank_alpha must lie in [0, 1]");
        }
        if !(self.s > 0.0) || self.margin_alpha < 0.0 {
            return bad("s must be positive and margin_alpha non-negative");
        }
        if self.refit_every == 0 {
            return bad("refit_every must be at least 1");
        }
        Ok(())
    }
}

/// Mutable state of a run; the trained artifacts live here afterwards.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub classifier: CosineClassifier,
    pub bank: MemoryBank,
    pub projector: SubspaceProjector,
    pub velocity: DMatrix<f64>,
    pub step: usize,
}

/// One JSON-lines metrics record per epoch. Loss fields are step averages;
/// the detection fields come from assessing the full target set at the end
/// of the epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_ugm: f64,
    pub l_unk: f64,
    pub l_sup: f64,
    pub l_total: f64,
    pub mu: f64,
    pub n_unknown_detected: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unknown_detection_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_score: Option<f64>,
}

/// Inverse decay: `lr0 * (1 + 10 * step / max_steps)^(-0.75)`.
pub fn lr_schedule(step: usize, max_steps: usize, lr0: f64) -> f64 {
    let progress = step as f64 / max_steps.max(1) as f64;
    lr0 * (1.0 + 10.0 * progress).powf(-0.75)
}

/// One Nesterov-momentum step with weight decay:
/// `v <- m v - lr (g + wd w); w <- w + m v - lr (g + wd w)`,
/// optionally renormalizing the rows afterwards (the cosine head keeps its
/// rows on the unit sphere).
pub fn sgd_step(
    params: &mut DMatrix<f64>,
    grads: &DMatrix<f64>,
    velocity: &mut DMatrix<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    renormalize_rows: bool,
) {
    debug_assert_eq!(params.shape(), grads.shape());
    debug_assert_eq!(params.shape(), velocity.shape());
    for i in 0..params.nrows() {
        for j in 0..params.ncols() {
            let d = grads[(i, j)] + weight_decay * params[(i, j)];
            let v = momentum * velocity[(i, j)] - lr * d;
            velocity[(i, j)] = v;
            params[(i, j)] += momentum * v - lr * d;
        }
    }
    if renormalize_rows {
        for i in 0..params.nrows() {
            let norm = params.row(i).norm();
            if norm > 1e-12 {
                for j in 0..params.ncols() {
                    params[(i, j)] /= norm;
                }
            }
        }
    }
}

/// Shuffles `0..n` and cuts it into `steps` batches of `batch` indices.
pub fn epoch_batches(rng: &mut Rng, n: usize, batch: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    (0..steps)
        .map(|s| order[s * batch..(s + 1) * batch].to_vec())
        .collect()
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(rows.len(), m.ncols());
    for (dst, &src) in rows.iter().enumerate() {
        out.set_row(dst, &m.row(src));
    }
    out
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols())).copy_from(b);
    out
}

/// Epoch-end sweep over the whole target set with the current snapshot.
fn epoch_assessment(
    state: &TrainState,
    snapshot: &BankSnapshot,
    target: &FeatureSet,
    params: &AssessParams,
    truth: Option<&ScenarioTruth>,
) -> Result<(usize, Option<f64>, Option<f64>), TrainError> {
    let targets_sub = state.projector.project(target.features())?;
    let assessments = assess_batch(&targets_sub, snapshot, params)?;
    let n_unknown = assessments
        .iter()
        .filter(|a| a.verdict == Verdict::Unknown)
        .count();

    let Some(truth) = truth else {
        return Ok((n_unknown, None, None));
    };

    let detection_acc = detection_accuracy(&assessments, &truth.target_unknown_mask);
    let c = state.classifier.num_classes();
    let predictions: Vec<usize> = (0..target.n())
        .map(|i| eval::predict(&state.classifier, &target.row(i)))
        .collect();
    let report = eval::evaluate(&predictions, &truth.target_true_labels, c)?;
    Ok((n_unknown, Some(detection_acc), Some(report.h)))
}

/// Runs the full objective (or the CE baseline, per `cfg.mode`).
///
/// Seed derivations, all from `cfg.seed`: stream 0 initializes the
/// classifier, stream 1 shuffles source batches, stream 2 shuffles target
/// batches; the per-sample extra draws of the delta filter use `cfg.seed`
/// with the global step as salt. Identical configs therefore reproduce
/// identical trajectories.
pub fn run_training(
    source: &FeatureSet,
    target: &FeatureSet,
    cfg: &TrainConfig,
    truth: Option<&ScenarioTruth>,
) -> Result<(TrainState, Vec<MetricsRow>), TrainError> {
    cfg.validate()?;
    if source.dim() != target.dim() {
        return Err(TrainError::DimensionMismatch {
            source_dim: source.dim(),
            target_dim: target.dim(),
        });
    }
    if let Some(t) = truth {
        if t.target_true_labels.len() != target.n() {
            return Err(TrainError::BadConfig(
                "truth length does not match target".into(),
            ));
        }
    }

    let root = Rng::seeded(cfg.seed);
    let mut clf_rng = root.derive(0);
    let mut source_shuffle = root.derive(1);
    let mut target_shuffle = root.derive(2);

    let bank = init_bank(source, cfg.bank_alpha)?;
    let c = bank.num_classes();
    let d = source.dim();
    let classifier =
        CosineClassifier::init_random(c, d, cfg.s, cfg.margin_alpha, &mut clf_rng)?;

    let batch = cfg.batch_size.min(source.n()).min(target.n());
    let steps_per_epoch = (source.n().min(target.n()) / batch).max(1);
    let max_steps = cfg.epochs * steps_per_epoch;
    let tau = cfg.tau_or_default();
    let k = cfg.k.min(bank.len());

    let mut state = TrainState {
        classifier,
        bank,
        projector: fit_projector(
            &stack_rows(source.features(), target.features()),
            cfg.subspace,
        )?,
        velocity: DMatrix::zeros(c, d),
        step: 0,
    };
    let mut snapshot = BankSnapshot::new(
        state.projector.project(state.bank.slots())?,
        state.bank.labels().to_vec(),
    );

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.mode == TrainMode::Full && epoch > 0 && epoch % cfg.refit_every == 0 {
            state.projector = fit_projector(
                &stack_rows(state.bank.slots(), target.features()),
                cfg.subspace,
            )?;
            snapshot = BankSnapshot::new(
                state.projector.project(state.bank.slots())?,
                state.bank.labels().to_vec(),
            );
        }

        let source_batches = epoch_batches(&mut source_shuffle, source.n(), batch, steps_per_epoch);
        let target_batches = epoch_batches(&mut target_shuffle, target.n(), batch, steps_per_epoch);

        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // ugm, unk, sup, total, mu
        for (src_idx, tgt_idx) in source_batches.iter().zip(&target_batches) {
            let src_feats = gather_rows(source.features(), src_idx);
            let src_labels: Vec<usize> = {
                let all = source.labels().expect("bank construction checked labels");
                src_idx.iter().map(|&i| all[i]).collect()
            };

            let report = match cfg.mode {
                TrainMode::CeBaseline => {
                    let ce = ce_loss_and_grad(&state.classifier, &src_feats, &src_labels)?;
                    let lr = lr_schedule(state.step, max_steps, cfg.lr_classifier);
                    sgd_step(
                        state.classifier.weights_mut(),
                        &ce.w_grad,
                        &mut state.velocity,
                        lr,
                        cfg.sgd_momentum,
                        cfg.weight_decay,
                        false,
                    );
                    state.step += 1;
                    sums.3 += ce.loss;
                    continue;
                }
                TrainMode::Full => {
                    for &i in src_idx {
                        state.bank.update_slot(i, &source.row(i))?;
                    }
                    if cfg.refit_per_batch {
                        let tgt_feats = gather_rows(target.features(), tgt_idx);
                        state.projector = fit_projector(
                            &stack_rows(state.bank.slots(), &tgt_feats),
                            cfg.subspace,
                        )?;
                        snapshot = BankSnapshot::new(
                            state.projector.project(state.bank.slots())?,
                            state.bank.labels().to_vec(),
                        );
                    }

                    let tgt_feats = gather_rows(target.features(), tgt_idx);
                    let tgt_sub = state.projector.project(&tgt_feats)?;
                    let assess_params = AssessParams {
                        k,
                        tau,
                        delta_filter: cfg.delta_filter,
                        delta_factor: cfg.delta_factor,
                        seed: cfg.seed,
                        salt: state.step as u64,
                    };
                    let assessments = assess_batch(&tgt_sub, &snapshot, &assess_params)?;

                    let mut known_rows = Vec::new();
                    let mut known_labels = Vec::new();
                    let mut unknown_rows = Vec::new();
                    for (row, a) in assessments.iter().enumerate() {
                        match (a.verdict, a.pseudo_label) {
                            (Verdict::Known, Some(label)) => {
                                known_rows.push(row);
                                known_labels.push(label);
                            }
                            _ => unknown_rows.push(row),
                        }
                    }

                    let unknown_feats = gather_rows(&tgt_feats, &unknown_rows);
                    let mu = if cfg.force_zero_margin {
                        0.0
                    } else {
                        let probs: Vec<DVector<f64>> = (0..unknown_feats.nrows())
                            .map(|i| {
                                state
                                    .classifier
                                    .forward_probs(&unknown_feats.row(i).transpose(), None)
                            })
                            .collect();
                        compute_margin_mu(&probs)
                    };

                    // labeled batch: source samples plus accepted targets
                    let (labeled_feats, labeled_labels) = if cfg.use_pseudo_targets
                        && !known_rows.is_empty()
                    {
                        let known_feats = gather_rows(&tgt_feats, &known_rows);
                        let mut labels = src_labels.clone();
                        labels.extend_from_slice(&known_labels);
                        (stack_rows(&src_feats, &known_feats), labels)
                    } else {
                        (src_feats.clone(), src_labels.clone())
                    };

                    let ugm =
                        ugm_loss_and_grad(&state.classifier, &labeled_feats, &labeled_labels, mu)?;
                    let unk = unknown_loss_and_grad(&state.classifier, &unknown_feats)?;
                    let (l_sup, _anchor_grads) = supcon_loss_and_grad(
                        &src_feats,
                        &src_labels,
                        state.bank.slots(),
                        state.bank.labels(),
                        cfg.temperature,
                        Some(src_idx),
                    )?;
                    total_loss(&ugm, &unk, l_sup, mu, cfg.lambda)
                }
            };

            let lr = lr_schedule(state.step, max_steps, cfg.lr_classifier);
            sgd_step(
                state.classifier.weights_mut(),
                &report.w_grad,
                &mut state.velocity,
                lr,
                cfg.sgd_momentum,
                cfg.weight_decay,
                true,
            );
            state.step += 1;

            sums.0 += report.l_ugm;
            sums.1 += report.l_unk;
            sums.2 += report.l_sup;
            sums.3 += report.l_total;
            sums.4 += report.mu;
        }

        let inv = 1.0 / steps_per_epoch as f64;
        let (n_unknown, detection_acc, h) = match cfg.mode {
            TrainMode::Full => {
                let assess_params = AssessParams {
                    k,
                    tau,
                    delta_filter: cfg.delta_filter,
                    delta_factor: cfg.delta_factor,
                    seed: cfg.seed,
                    salt: (1u64 << 40) + epoch as u64,
                };
                epoch_assessment(&state, &snapshot, target, &assess_params, truth)?
            }
            TrainMode::CeBaseline => {
                let h = truth
                    .map(|t| {
                        let predictions: Vec<usize> = (0..target.n())
                            .map(|i| {
                                eval::predict_linear(state.classifier.weights(), &target.row(i))
                            })
                            .collect();
                        eval::evaluate(
                            &predictions,
                            &t.target_true_labels,
                            state.classifier.num_classes(),
                        )
                        .map(|r| r.h)
                    })
                    .transpose()?;
                (0, None, h)
            }
        };

        metrics.push(MetricsRow {
            epoch,
            l_ugm: sums.0 * inv,
            l_unk: sums.1 * inv,
            l_sup: sums.2 * inv,
            l_total: sums.3 * inv,
            mu: sums.4 * inv,
            n_unknown_detected: n_unknown,
            unknown_detection_acc: detection_acc,
            h_score: h,
        });
    }

    Ok((state, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scenario, ScenarioConfig, ShiftConfig};
    use approx::assert_relative_eq;

    fn scenario(n_common: usize, n_priv: usize, n_unk: usize, spc: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_common,
            n_source_private: n_priv,
            n_target_private: n_unk,
            samples_per_class: spc,
            dim: 8,
            cluster_std: 0.25,
            shift: ShiftConfig {
                rotation_angle: 0.05,
                translation_magnitude: 0.1,
                scale: 1.0,
            },
            seed,
        }
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            k: 5,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_starts_at_lr0_and_decays() {
        assert_eq!(lr_schedule(0, 100, 0.01), 0.01);
        for step in 0..99 {
            assert!(lr_schedule(step + 1, 100, 0.01) <= lr_schedule(step, 100, 0.01));
        }
        // end of schedule: lr0 * 11^(-0.75)
        let expect = 0.01 * 11f64.powf(-0.75);
        assert_relative_eq!(lr_schedule(100, 100, 0.01), expect, epsilon = 1e-15);
        assert_relative_eq!(lr_schedule(100, 100, 0.01), 0.0016556002607617019, epsilon = 1e-12);
    }

    #[test]
    fn plain_gradient_descent_when_momentum_and_decay_vanish() {
        let mut w = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let g = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let mut v = DMatrix::zeros(1, 2);
        sgd_step(&mut w, &g, &mut v, 0.1, 0.0, 0.0, false);
        assert_relative_eq!(w[(0, 0)], 1.0 - 0.05, epsilon = 1e-15);
        assert_relative_eq!(w[(0, 1)], 2.0 + 0.1, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_and_velocity_change_nothing() {
        let mut w = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        let g = DMatrix::zeros(1, 2);
        let mut v = DMatrix::zeros(1, 2);
        sgd_step(&mut w, &g, &mut v, 0.1, 0.9, 0.0, true);
        assert_relative_eq!(w[(0, 0)], 0.6, epsilon = 1e-12);
        assert_relative_eq!(w[(0, 1)], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn converges_on_a_quadratic_bowl() {
        // f(w) = |w - w*|^2 / 2 with the optimum at (3, -2)
        let target = DVector::from_vec(vec![3.0, -2.0]);
        let mut w = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let mut v = DMatrix::zeros(1, 2);
        let mut steps = 0;
        for _ in 0..500 {
            let g = DMatrix::from_fn(1, 2, |_, j| w[(0, j)] - target[j]);
            sgd_step(&mut w, &g, &mut v, 0.05, 0.9, 0.0, false);
            steps += 1;
            if (w.row(0).transpose() - &target).norm() < 1e-6 {
                break;
            }
        }
        assert!(
            (w.row(0).transpose() - target).norm() < 1e-6,
            "not converged after {steps} steps"
        );
    }

    #[test]
    fn converges_on_the_sphere_when_renormalizing() {
        // optimum on the unit sphere, so the projected iterates can reach it
        let target = DVector::from_vec(vec![0.6, 0.8]);
        let mut w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mut v = DMatrix::zeros(1, 2);
        for _ in 0..500 {
            let g = DMatrix::from_fn(1, 2, |_, j| w[(0, j)] - target[j]);
            sgd_step(&mut w, &g, &mut v, 0.05, 0.9, 0.0, true);
        }
        assert!((w.row(0).transpose() - target).norm() < 1e-6);
    }

    #[test]
    fn two_class_toy_without_privates_is_mostly_known() {
        let mut sc = scenario(2, 0, 0, 60, 5);
        sc.dim = 16;
        sc.cluster_std = 0.12;
        let (source, target, _) = generate_scenario(&sc).unwrap();
        let mut cfg = quick_cfg(5);
        cfg.epochs = 1;
        cfg.k = 25;
        let (_, metrics) = run_training(&source, &target, &cfg, None).unwrap();
        let last = metrics.last().unwrap();
        let frac_unknown = last.n_unknown_detected as f64 / target.n() as f64;
        assert!(frac_unknown <= 0.05, "unknown fraction {frac_unknown}");
    }

    #[test]
    fn training_is_deterministic() {
        let (source, target, truth) = generate_scenario(&scenario(3, 1, 2, 20, 7)).unwrap();
        let cfg = quick_cfg(7);
        let (a, ma) = run_training(&source, &target, &cfg, Some(&truth)).unwrap();
        let (b, mb) = run_training(&source, &target, &cfg, Some(&truth)).unwrap();
        assert_eq!(a.classifier.weights(), b.classifier.weights());
        for (ra, rb) in ma.iter().zip(&mb) {
            assert_eq!(
                serde_json::to_string(ra).unwrap(),
                serde_json::to_string(rb).unwrap()
            );
        }
    }

    #[test]
    fn rows_and_slots_stay_unit_norm() {
        let (source, target, _) = generate_scenario(&scenario(3, 1, 2, 20, 8)).unwrap();
        let cfg = quick_cfg(8);
        let (state, _) = run_training(&source, &target, &cfg, None).unwrap();
        for i in 0..state.classifier.num_classes() {
            assert_relative_eq!(
                state.classifier.weights().row(i).norm(),
                1.0,
                epsilon = 1e-6
            );
        }
        for i in 0..state.bank.len() {
            assert_relative_eq!(state.bank.slot(i).norm(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn ablated_run_matches_a_ce_supcon_reference_step_for_step() {
        let (source, target, _) = generate_scenario(&scenario(3, 0, 1, 20, 9)).unwrap();
        let mut cfg = quick_cfg(9);
        cfg.lambda = 0.0;
        cfg.tau = Some(0);
        cfg.delta_filter = false;
        cfg.force_zero_margin = true;
        cfg.use_pseudo_targets = false;
        let (state, _) = run_training(&source, &target, &cfg, None).unwrap();

        // reference: scaled-cosine CE + supcon over the same batch schedule
        let root = Rng::seeded(cfg.seed);
        let mut clf_rng = root.derive(0);
        let mut source_shuffle = root.derive(1);
        let bank = init_bank(&source, cfg.bank_alpha).unwrap();
        let c = bank.num_classes();
        let mut clf =
            CosineClassifier::init_random(c, source.dim(), cfg.s, cfg.margin_alpha, &mut clf_rng)
                .unwrap();
        let mut velocity = DMatrix::<f64>::zeros(c, source.dim());
        let batch = cfg.batch_size.min(source.n()).min(target.n());
        let steps = (source.n().min(target.n()) / batch).max(1);
        let max_steps = cfg.epochs * steps;
        let labels_all = source.labels().unwrap();
        let mut step = 0;
        for _epoch in 0..cfg.epochs {
            for idx in epoch_batches(&mut source_shuffle, source.n(), batch, steps) {
                let feats = gather_rows(source.features(), &idx);
                let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
                let ugm = ugm_loss_and_grad(&clf, &feats, &labels, 0.0).unwrap();
                let lr = lr_schedule(step, max_steps, cfg.lr_classifier);
                sgd_step(
                    clf.weights_mut(),
                    &ugm.w_grad,
                    &mut velocity,
                    lr,
                    cfg.sgd_momentum,
                    cfg.weight_decay,
                    true,
                );
                step += 1;
            }
        }
        assert_eq!(state.classifier.weights(), clf.weights());
    }

    #[test]
    fn source_only_training_fits_separable_source() {
        let mut sc = scenario(3, 0, 0, 30, 10);
        sc.cluster_std = 0.12;
        let (source, target, _) = generate_scenario(&sc).unwrap();
        let mut cfg = quick_cfg(10);
        cfg.epochs = 30;
        cfg.lambda = 0.0;
        cfg.use_pseudo_targets = false;
        cfg.force_zero_margin = true;
        let (state, _) = run_training(&source, &target, &cfg, None).unwrap();

        let labels = source.labels().unwrap();
        let correct = (0..source.n())
            .filter(|&i| {
                let p = state.classifier.forward_probs(&source.row(i), None);
                p.imax() == labels[i]
            })
            .count();
        let acc = correct as f64 / source.n() as f64;
        assert!(acc >= 0.99, "source accuracy {acc}");
    }
}
