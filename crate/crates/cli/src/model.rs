//! Trained-model container: classifier weights, the fitted projector, and a
//! full echo of the run configuration for provenance.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use unida::losses::CosineClassifier;
use unida::subspace::SubspaceProjector;
use unida::trainer::TrainMode;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectorFile {
    pub mean: Vec<f64>,
    /// Row-major `m x p` basis.
    pub basis: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub head: TrainMode,
    pub num_classes: usize,
    pub dim: usize,
    pub s: f64,
    pub margin_alpha: f64,
    /// Row-major `num_classes x dim` weights.
    pub w: Vec<Vec<f64>>,
    pub projector: ProjectorFile,
    pub config: RunConfig,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Runtime(format!("model file: malformed {what}")));
    }
    let mut m = DMatrix::<f64>::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

impl ModelFile {
    pub fn new(
        head: TrainMode,
        classifier: &CosineClassifier,
        projector: &SubspaceProjector,
        config: &RunConfig,
    ) -> Self {
        ModelFile {
            head,
            num_classes: classifier.num_classes(),
            dim: classifier.dim(),
            s: classifier.s(),
            margin_alpha: classifier.margin_alpha(),
            w: matrix_to_rows(classifier.weights()),
            projector: ProjectorFile {
                mean: projector.mean().iter().copied().collect(),
                basis: matrix_to_rows(projector.basis()),
                singular_values: projector.singular_values().to_vec(),
            },
            config: config.clone(),
        }
    }

    pub fn classifier(&self) -> Result<CosineClassifier, CliError> {
        let w = rows_to_matrix(&self.w, "classifier weights")?;
        if w.nrows() != self.num_classes || w.ncols() != self.dim {
            return Err(CliError::Runtime(
                "model file: weight shape disagrees with header".into(),
            ));
        }
        CosineClassifier::new(w, self.s, self.margin_alpha)
            .map_err(|e| CliError::Runtime(format!("model file: {e}")))
    }

    pub fn projector(&self) -> Result<SubspaceProjector, CliError> {
        let basis = rows_to_matrix(&self.projector.basis, "projector basis")?;
        SubspaceProjector::from_parts(
            DVector::from_vec(self.projector.mean.clone()),
            basis,
            self.projector.singular_values.clone(),
        )
        .map_err(|e| CliError::Runtime(format!("model file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize model: {e}")))?;
        std::fs::write(path, json)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("invalid model {}: {e}", path.display())))
    }
}
