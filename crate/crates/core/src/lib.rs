//! Uncertainty-guided universal domain adaptation on fixed feature
//! embeddings.
//!
//! The pipeline discovers unknown target samples by checking the label
//! consistency of their nearest source neighbors inside a learned linear
//! subspace, refines the survivors with a spectral compactness filter, and
//! trains a cosine classifier whose margin adapts to the confidence of the
//! discovered unknowns. See the module docs for the individual stages:
//!
//! * [`dataset`] - feature sets, file formats, synthetic scenarios
//! * [`subspace`] - covariance eigenbasis and projection
//! * [`membank`] - momentum feature bank and exact k-NN
//! * [`uncertainty`] - neighbor-consistency scores and the delta filter
//! * [`losses`] - cosine classifier with margin, unknown, and contrastive
//!   terms plus their analytic gradients
//! * [`trainer`] - the end-to-end training loop
//! * [`eval`] - entropy-threshold inference, H-score, histogram exports

pub mod dataset;
pub mod eval;
pub mod losses;
pub mod membank;
pub mod rng;
pub mod subspace;
pub mod trainer;
pub mod uncertainty;

pub use dataset::{FeatureSet, ScenarioConfig, ScenarioTruth};
pub use eval::EvalReport;
pub use losses::CosineClassifier;
pub use membank::MemoryBank;
pub use subspace::{SubspacePolicy, SubspaceProjector};
pub use trainer::{TrainConfig, TrainState};
pub use uncertainty::{UncertaintyAssessment, Verdict};
