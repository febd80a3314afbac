//! Evaluation, diversity analysis and ensembling of multi-label classifier
//! prediction sets, with a small gated residual network and a synthetic
//! benchmark generator.

pub mod combine;
pub mod data;
pub mod diversity;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod synth;

pub use combine::{apply_weights, average_combine, EnsembleWeights, FitReport, MoeHyperParams, MoeKind, WeightKind};
pub use data::{LabelSet, PredictionSet, SelectRows, SplitSpec};
pub use diversity::Measure;
pub use error::{Error, Result};
pub use metrics::{gap_at_k, oracle_matrix, OracleMatrix};
