//! Ensemble combiners and weight application.

mod adam;
mod greedy;
mod moe;
mod weights;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use greedy::{
    average_ranks, fit_pair_weight, fit_quadratic, greedy_correlation_ensemble, pearson_correlation,
    pearson_slices, CorrelationKind, GreedyOptions, GreedyTrace, MergeStep, PairFit, CONCAVITY_EPS, DEFAULT_GRID,
};
pub use moe::{moe_fit, moe_loss, EpochRecord, FitReport, MoeHyperParams, MoeKind};
pub use weights::{apply_weights, average_combine, EnsembleWeights, WeightKind, WeightsMetadata, ENSEMBLE_MODEL_NAME};
