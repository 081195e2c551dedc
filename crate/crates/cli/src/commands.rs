//! Implementations of the CLI subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use unida::dataset::{self, FeatureSet, FileFormat, ScenarioTruth};
use unida::eval::{self, export_histograms};
use unida::subspace::SubspaceProjector;
use unida::trainer::{run_training, TrainMode};
use unida::uncertainty::{assess_batch, AssessParams, BankSnapshot, Verdict};

use crate::config::RunConfig;
use crate::model::ModelFile;
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn out_dir(config: &RunConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.paths.out_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set paths.out_dir".into()))
}

fn load_set(path: &Path) -> Result<FeatureSet, CliError> {
    dataset::load_features(path, FileFormat::from_path(path)).map_err(runtime)
}

/// Writes `index,true_label,is_unknown` rows.
pub fn write_truth_csv(path: &Path, truth: &ScenarioTruth) -> Result<(), CliError> {
    let mut out = String::from("index,true_label,is_unknown\n");
    for (i, (&label, &unknown)) in truth
        .target_true_labels
        .iter()
        .zip(&truth.target_unknown_mask)
        .enumerate()
    {
        out.push_str(&format!("{i},{label},{}\n", u8::from(unknown)));
    }
    std::fs::write(path, out).map_err(runtime)
}

pub fn read_truth_csv(path: &Path) -> Result<ScenarioTruth, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read truth {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("index,true_label,is_unknown") => {}
        other => {
            return Err(CliError::Runtime(format!(
                "truth csv: unexpected header {other:?}"
            )))
        }
    }
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(CliError::Runtime(format!("truth csv: bad row {}", n + 2)));
        }
        let index: usize = cells[0].parse().map_err(runtime)?;
        if index != labels.len() {
            return Err(CliError::Runtime(format!(
                "truth csv: non-contiguous index {index} at row {}",
                n + 2
            )));
        }
        labels.push(cells[1].parse::<usize>().map_err(runtime)?);
        mask.push(match cells[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CliError::Runtime(format!(
                    "truth csv: bad is_unknown {other:?}"
                )))
            }
        });
    }
    Ok(ScenarioTruth {
        target_unknown_mask: mask,
        target_true_labels: labels,
    })
}

pub fn write_predictions_csv(path: &Path, predictions: &[usize]) -> Result<(), CliError> {
    let mut out = String::from("index,predicted_class\n");
    for (i, &p) in predictions.iter().enumerate() {
        out.push_str(&format!("{i},{p}\n"));
    }
    std::fs::write(path, out).map_err(runtime)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read predictions {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("index,predicted_class") => {}
        other => {
            return Err(CliError::Runtime(format!(
                "predictions csv: unexpected header {other:?}"
            )))
        }
    }
    let mut predictions = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 2 {
            return Err(CliError::Runtime(format!(
                "predictions csv: bad row {}",
                n + 2
            )));
        }
        predictions.push(cells[1].parse::<usize>().map_err(runtime)?);
    }
    Ok(predictions)
}

/// `synth`: generate a scenario and write source.udaf, target.udaf,
/// truth.csv into the output directory.
pub fn cmd_synth(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let scenario = config.scenario()?;
    let dir = out_dir(&config, out)?;
    ensure_dir(&dir)?;

    let (source, target, truth) = dataset::generate_scenario(scenario).map_err(runtime)?;
    dataset::write_features(&dir.join("source.udaf"), &source, FileFormat::Binary)
        .map_err(runtime)?;
    dataset::write_features(&dir.join("target.udaf"), &target, FileFormat::Binary)
        .map_err(runtime)?;
    write_truth_csv(&dir.join("truth.csv"), &truth)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": dir,
            "source_n": source.n(),
            "target_n": target.n(),
            "dim": source.dim(),
            "classes": source.num_classes(),
        })
    );
    Ok(())
}

/// `train`: run the configured objective and write model.json plus
/// metrics.jsonl.
pub fn cmd_train(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let dir = out_dir(&config, out)?;
    ensure_dir(&dir)?;

    let source_path = config
        .paths
        .source
        .as_ref()
        .ok_or_else(|| CliError::Usage("config: paths.source is required for train".into()))?;
    let target_path = config
        .paths
        .target
        .as_ref()
        .ok_or_else(|| CliError::Usage("config: paths.target is required for train".into()))?;
    let source = load_set(source_path)?;
    let target = load_set(target_path)?;
    let truth = config
        .paths
        .truth
        .as_ref()
        .map(|p| read_truth_csv(p))
        .transpose()?;

    let (state, metrics) =
        run_training(&source, &target, &config.train, truth.as_ref()).map_err(runtime)?;

    let mut jsonl = std::io::BufWriter::new(
        std::fs::File::create(dir.join("metrics.jsonl")).map_err(runtime)?,
    );
    for row in &metrics {
        writeln!(jsonl, "{}", serde_json::to_string(row).map_err(runtime)?).map_err(runtime)?;
    }
    jsonl.flush().map_err(runtime)?;

    ModelFile::new(config.train.mode, &state.classifier, &state.projector, &config)
        .save(&dir.join("model.json"))?;

    let last = metrics.last();
    println!(
        "{}",
        serde_json::json!({
            "out_dir": dir,
            "epochs": metrics.len(),
            "final_total_loss": last.map(|r| r.l_total),
            "final_h_score": last.and_then(|r| r.h_score),
        })
    );
    Ok(())
}

fn predict_all(model: &ModelFile, target: &FeatureSet) -> Result<Vec<usize>, CliError> {
    let classifier = model.classifier()?;
    Ok((0..target.n())
        .map(|i| match model.head {
            TrainMode::Full => eval::predict(&classifier, &target.row(i)),
            TrainMode::CeBaseline => eval::predict_linear(classifier.weights(), &target.row(i)),
        })
        .collect())
}

/// `eval`: predict the target set, write predictions.csv, and print the
/// report (H-score included only when truth is given).
pub fn cmd_eval(
    model_path: &Path,
    target_path: &Path,
    truth_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = ModelFile::load(model_path)?;
    let target = load_set(target_path)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| model.config.paths.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;

    let predictions = predict_all(&model, &target)?;
    let pred_path = dir.join("predictions.csv");
    write_predictions_csv(&pred_path, &predictions)?;

    match truth_path {
        Some(tp) => {
            let truth = read_truth_csv(tp)?;
            let report = eval::evaluate(&predictions, &truth.target_true_labels, model.num_classes)
                .map_err(runtime)?;
            println!(
                "{}",
                serde_json::json!({
                    "n": target.n(),
                    "predictions": pred_path,
                    "report": report,
                })
            );
        }
        None => {
            println!(
                "{}",
                serde_json::json!({ "n": target.n(), "predictions": pred_path })
            );
        }
    }
    Ok(())
}

/// Assessment coordinates for `diagnose`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SpaceArg {
    Original,
    Subspace,
}

/// `diagnose`: per-sample assessment CSV plus histogram CSV.
///
/// In subspace mode the stored projector is applied, so the numbers describe
/// exactly the space the trained pipeline used. Histograms split by truth
/// when available and by verdict otherwise.
#[allow(clippy::too_many_arguments)]
pub fn cmd_diagnose(
    config_path: Option<&Path>,
    model_path: &Path,
    source_path: Option<&Path>,
    target_path: Option<&Path>,
    truth_path: Option<&Path>,
    space: SpaceArg,
    bins: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = ModelFile::load(model_path)?;
    let config = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => model.config.clone(),
    };
    let dir = out_dir(&config, out)?;
    ensure_dir(&dir)?;

    let source_path = source_path
        .map(Path::to_path_buf)
        .or_else(|| config.paths.source.clone())
        .ok_or_else(|| CliError::Usage("diagnose: no source path".into()))?;
    let target_path = target_path
        .map(Path::to_path_buf)
        .or_else(|| config.paths.target.clone())
        .ok_or_else(|| CliError::Usage("diagnose: no target path".into()))?;
    let source = load_set(&source_path)?;
    let target = load_set(&target_path)?;
    let truth = truth_path
        .map(read_truth_csv)
        .or_else(|| config.paths.truth.as_ref().map(|p| read_truth_csv(p)))
        .transpose()?;

    let labels = source
        .labels()
        .ok_or_else(|| CliError::Runtime("diagnose: source set has no labels".into()))?
        .to_vec();

    let (bank_coords, target_coords) = match space {
        SpaceArg::Original => (source.features().clone(), target.features().clone()),
        SpaceArg::Subspace => {
            let projector: SubspaceProjector = model.projector()?;
            (
                projector.project(source.features()).map_err(runtime)?,
                projector.project(target.features()).map_err(runtime)?,
            )
        }
    };
    let snapshot = BankSnapshot::new(bank_coords, labels);
    let params = AssessParams {
        k: config.train.k.min(snapshot.len()),
        tau: config.train.tau_or_default(),
        delta_filter: config.train.delta_filter,
        delta_factor: config.train.delta_factor,
        seed: config.train.seed,
        salt: 0,
    };
    let assessments = assess_batch(&target_coords, &snapshot, &params).map_err(runtime)?;

    // per-sample dump
    let mut csv = String::from("index,u,r_k,delta,lambda,verdict,true_unknown\n");
    for (i, a) in assessments.iter().enumerate() {
        let verdict = match a.verdict {
            Verdict::Known => "known",
            Verdict::Unknown => "unknown",
        };
        let true_unknown = truth
            .as_ref()
            .map(|t| u8::from(t.target_unknown_mask[i]).to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{i},{},{},{},{},{verdict},{true_unknown}\n",
            a.u, a.r_k, a.delta, a.lambda_max
        ));
    }
    std::fs::write(dir.join("assessments.csv"), csv).map_err(runtime)?;

    let classifier = model.classifier()?;
    let probs: Vec<DVector<f64>> = (0..target.n())
        .map(|i| classifier.forward_probs(&target.row(i), None))
        .collect();
    let split: Vec<bool> = match &truth {
        Some(t) => t.target_unknown_mask.clone(),
        None => assessments
            .iter()
            .map(|a| a.verdict == Verdict::Unknown)
            .collect(),
    };
    export_histograms(
        &assessments,
        &probs,
        &split,
        bins,
        &dir.join("histograms.csv"),
    )
    .map_err(runtime)?;

    let n_unknown = assessments
        .iter()
        .filter(|a| a.verdict == Verdict::Unknown)
        .count();
    println!(
        "{}",
        serde_json::json!({
            "out_dir": dir,
            "n_targets": target.n(),
            "n_unknown_detected": n_unknown,
            "split_by": if truth.is_some() { "truth" } else { "verdict" },
        })
    );
    Ok(())
}

/// `score`: recompute the H-score from a predictions CSV and a truth CSV.
pub fn cmd_score(predictions_path: &Path, truth_path: &Path) -> Result<(), CliError> {
    let predictions = read_predictions_csv(predictions_path)?;
    let truth = read_truth_csv(truth_path)?;
    if predictions.len() != truth.target_true_labels.len() {
        return Err(CliError::Runtime(format!(
            "predictions ({}) and truth ({}) differ in length",
            predictions.len(),
            truth.target_true_labels.len()
        )));
    }
    // the unknown class id is what the truth file codes unknowns as
    let num_classes = truth
        .target_true_labels
        .iter()
        .zip(&truth.target_unknown_mask)
        .find(|(_, &unk)| unk)
        .map(|(&l, _)| l)
        .unwrap_or_else(|| truth.target_true_labels.iter().max().map_or(0, |&m| m + 1));
    let report = eval::evaluate(&predictions, &truth.target_true_labels, num_classes)
        .map_err(runtime)?;
    println!(
        "{}",
        serde_json::json!({
            "a_com": report.a_com,
            "a_unk": report.a_unk,
            "h": report.h,
        })
    );
    Ok(())
}
