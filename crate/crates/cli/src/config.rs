//! Run configuration: one JSON document per run, echoed into outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unida::dataset::ScenarioConfig;
use unida::trainer::TrainConfig;
use unida::uncertainty::DiagnosticsConfig;

use crate::CliError;

/// File locations a run reads and writes.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Union of the per-stage configs; sections may be omitted when a command
/// does not need them. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Option<ScenarioConfig>,
    pub train: TrainConfig,
    pub diagnostics: Option<DiagnosticsConfig>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: None,
            train: TrainConfig::default(),
            diagnostics: None,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn scenario(&self) -> Result<&ScenarioConfig, CliError> {
        self.scenario
            .as_ref()
            .ok_or_else(|| CliError::Usage("config is missing the \"scenario\" section".into()))
    }
}
