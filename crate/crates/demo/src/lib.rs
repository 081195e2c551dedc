//! Browser demo: synthesize a scenario, run the unknown-discovery stage in
//! both coordinate spaces, or train end to end, all driven by a small JSON
//! config and returning JSON strings the page renders onto canvases.
//!
//! The JSON-in/JSON-out core functions are plain Rust and unit-tested
//! natively; `#[wasm_bindgen]` wrappers expose them to the page. Errors come
//! back as `{"error": "..."}` so the page can surface them without
//! exceptions.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

use unida::dataset::{generate_scenario, FeatureSet, ScenarioConfig, ScenarioTruth, ShiftConfig};
use unida::eval::{self, entropy, entropy_threshold};
use unida::subspace::{fit_projector, SubspacePolicy};
use unida::trainer::{run_training, TrainConfig, TrainMode};
use unida::uncertainty::{
    assess_dataset, detection_accuracy, AssessParams, AssessSpace, Verdict,
};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub n_common: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub cluster_std: f64,
    pub rotation_angle: f64,
    pub translation_magnitude: f64,
    pub k: usize,
    pub tau: Option<usize>,
    pub subspace_dims: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            n_common: 6,
            n_source_private: 3,
            n_target_private: 6,
            samples_per_class: 40,
            dim: 32,
            cluster_std: 0.2,
            rotation_angle: 0.1,
            translation_magnitude: 0.8,
            k: 25,
            tau: None,
            subspace_dims: 8,
            epochs: 6,
            seed: 1,
        }
    }
}

impl DemoConfig {
    fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            n_common: self.n_common,
            n_source_private: self.n_source_private,
            n_target_private: self.n_target_private,
            samples_per_class: self.samples_per_class,
            dim: self.dim,
            cluster_std: self.cluster_std,
            shift: ShiftConfig {
                rotation_angle: self.rotation_angle,
                translation_magnitude: self.translation_magnitude,
                scale: 1.0,
            },
            seed: self.seed,
        }
    }

    fn assess_params(&self) -> AssessParams {
        let tau = self.tau.unwrap_or_else(|| AssessParams::default_tau(self.k));
        AssessParams::new(self.k, tau, self.seed)
    }

    fn policy(&self) -> SubspacePolicy {
        SubspacePolicy::Fixed(self.subspace_dims.clamp(1, self.dim))
    }
}

fn parse_config(json: &str) -> Result<DemoConfig, String> {
    if json.trim().is_empty() {
        return Ok(DemoConfig::default());
    }
    serde_json::from_str(json).map_err(|e| format!("config: {e}"))
}

fn build(cfg: &DemoConfig) -> Result<(FeatureSet, FeatureSet, ScenarioTruth), String> {
    generate_scenario(&cfg.scenario()).map_err(|e| e.to_string())
}

/// Top-2 joint principal coordinates for plotting.
fn plot_coords(
    source: &FeatureSet,
    target: &FeatureSet,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>), String> {
    let mut joint = nalgebra::DMatrix::<f64>::zeros(source.n() + target.n(), source.dim());
    joint
        .view_mut((0, 0), (source.n(), source.dim()))
        .copy_from(source.features());
    joint
        .view_mut((source.n(), 0), (target.n(), target.dim()))
        .copy_from(target.features());
    let proj = fit_projector(&joint, SubspacePolicy::Fixed(2)).map_err(|e| e.to_string())?;
    let take = |set: &FeatureSet| -> Result<Vec<[f64; 2]>, String> {
        let p = proj.project(set.features()).map_err(|e| e.to_string())?;
        Ok((0..p.nrows()).map(|i| [p[(i, 0)], p[(i, 1)]]).collect())
    };
    Ok((take(source)?, take(target)?))
}

#[derive(Serialize)]
struct ScenarioOut {
    source_xy: Vec<[f64; 2]>,
    source_labels: Vec<usize>,
    target_xy: Vec<[f64; 2]>,
    target_true_labels: Vec<usize>,
    target_unknown: Vec<bool>,
    num_source_classes: usize,
}

fn scenario_json(config_json: &str) -> Result<String, String> {
    let cfg = parse_config(config_json)?;
    let (source, target, truth) = build(&cfg)?;
    let (source_xy, target_xy) = plot_coords(&source, &target)?;
    let out = ScenarioOut {
        source_xy,
        source_labels: source.labels().unwrap_or(&[]).to_vec(),
        target_xy,
        target_true_labels: truth.target_true_labels.clone(),
        target_unknown: truth.target_unknown_mask.clone(),
        num_source_classes: cfg.n_common + cfg.n_source_private,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SpaceOut {
    accuracy: f64,
    verdict_unknown: Vec<bool>,
    /// histogram over u = 0..=k, split by truth
    u_hist_known: Vec<usize>,
    u_hist_unknown: Vec<usize>,
}

#[derive(Serialize)]
struct AssessOut {
    target_xy: Vec<[f64; 2]>,
    target_unknown: Vec<bool>,
    k: usize,
    tau: usize,
    original: SpaceOut,
    subspace: SpaceOut,
}

fn space_out(
    source: &FeatureSet,
    target: &FeatureSet,
    truth: &ScenarioTruth,
    space: AssessSpace,
    params: &AssessParams,
) -> Result<SpaceOut, String> {
    let (assessments, _) =
        assess_dataset(source, target, space, params).map_err(|e| e.to_string())?;
    let mut u_hist_known = vec![0usize; params.k + 1];
    let mut u_hist_unknown = vec![0usize; params.k + 1];
    for (a, &unk) in assessments.iter().zip(&truth.target_unknown_mask) {
        if unk {
            u_hist_unknown[a.u] += 1;
        } else {
            u_hist_known[a.u] += 1;
        }
    }
    Ok(SpaceOut {
        accuracy: detection_accuracy(&assessments, &truth.target_unknown_mask),
        verdict_unknown: assessments
            .iter()
            .map(|a| a.verdict == Verdict::Unknown)
            .collect(),
        u_hist_known,
        u_hist_unknown,
    })
}

fn assessment_json(config_json: &str) -> Result<String, String> {
    let cfg = parse_config(config_json)?;
    let (source, target, truth) = build(&cfg)?;
    let params = cfg.assess_params();
    let (_, target_xy) = plot_coords(&source, &target)?;
    let out = AssessOut {
        target_xy,
        target_unknown: truth.target_unknown_mask.clone(),
        k: params.k,
        tau: params.tau,
        original: space_out(&source, &target, &truth, AssessSpace::Original, &params)?,
        subspace: space_out(
            &source,
            &target,
            &truth,
            AssessSpace::Subspace(cfg.policy()),
            &params,
        )?,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct EpochOut {
    epoch: usize,
    l_ugm: f64,
    l_unk: f64,
    l_sup: f64,
    l_total: f64,
    mu: f64,
    h_score: Option<f64>,
}

#[derive(Serialize)]
struct TrainOut {
    epochs: Vec<EpochOut>,
    baseline_h: f64,
    final_h: f64,
    a_com: f64,
    a_unk: f64,
    entropy_threshold: f64,
    /// final prediction entropies split by truth
    entropy_known: Vec<f64>,
    entropy_unknown: Vec<f64>,
    target_xy: Vec<[f64; 2]>,
    predicted_unknown: Vec<bool>,
    target_unknown: Vec<bool>,
}

fn train_json(config_json: &str) -> Result<String, String> {
    let cfg = parse_config(config_json)?;
    let (source, target, truth) = build(&cfg)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs.max(1),
        k: cfg.k,
        tau: cfg.tau,
        subspace: cfg.policy(),
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let (state, metrics) =
        run_training(&source, &target, &train_cfg, Some(&truth)).map_err(|e| e.to_string())?;

    let baseline_cfg = TrainConfig {
        mode: TrainMode::CeBaseline,
        ..train_cfg
    };
    let (_, baseline_metrics) =
        run_training(&source, &target, &baseline_cfg, Some(&truth)).map_err(|e| e.to_string())?;
    let baseline_h = baseline_metrics
        .last()
        .and_then(|r| r.h_score)
        .unwrap_or(0.0);

    let c = state.classifier.num_classes();
    let mut predictions = Vec::with_capacity(target.n());
    let mut entropy_known = Vec::new();
    let mut entropy_unknown = Vec::new();
    for i in 0..target.n() {
        let probs = state.classifier.forward_probs(&target.row(i), None);
        let e = entropy(&probs);
        if truth.target_unknown_mask[i] {
            entropy_unknown.push(e);
        } else {
            entropy_known.push(e);
        }
        predictions.push(eval::predict_from_probs(&probs));
    }
    let report =
        eval::evaluate(&predictions, &truth.target_true_labels, c).map_err(|e| e.to_string())?;

    let (_, target_xy) = plot_coords(&source, &target)?;
    let out = TrainOut {
        epochs: metrics
            .iter()
            .map(|r| EpochOut {
                epoch: r.epoch,
                l_ugm: r.l_ugm,
                l_unk: r.l_unk,
                l_sup: r.l_sup,
                l_total: r.l_total,
                mu: r.mu,
                h_score: r.h_score,
            })
            .collect(),
        baseline_h,
        final_h: report.h,
        a_com: report.a_com,
        a_unk: report.a_unk,
        entropy_threshold: entropy_threshold(c),
        entropy_known,
        entropy_unknown,
        target_xy,
        predicted_unknown: predictions.iter().map(|&p| p == c).collect(),
        target_unknown: truth.target_unknown_mask.clone(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn or_error(result: Result<String, String>) -> String {
    result.unwrap_or_else(|e| serde_json::json!({ "error": e }).to_string())
}

/// Generates a scenario and returns 2-D plot coordinates with labels.
#[wasm_bindgen]
pub fn synthesize_scenario(config_json: &str) -> String {
    or_error(scenario_json(config_json))
}

/// Runs the unknown-discovery stage in the original space and the subspace,
/// returning verdicts, accuracies, and score histograms.
#[wasm_bindgen]
pub fn run_assessment(config_json: &str) -> String {
    or_error(assessment_json(config_json))
}

/// Trains the full objective plus the CE baseline and returns loss curves,
/// H-scores, and the final entropy split.
#[wasm_bindgen]
pub fn train_and_evaluate(config_json: &str) -> String {
    or_error(train_json(config_json))
}
