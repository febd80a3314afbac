pub mod diversity;
pub mod ensemble;
pub mod eval;
pub mod report;
pub mod synth;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use videns_core::data::{ensure_pred_labels, load_labels, load_predictions_with, LoadOptions};
use videns_core::{LabelSet, PredictionSet, SelectRows};

use crate::config::{files, ExperimentConfig, Subset};
use crate::error::{data, usage, CliResult};

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| data(format!("cannot create {}: {e}", dir.display())))
}

pub(crate) fn prediction_path(cfg: &ExperimentConfig, model: &str) -> PathBuf {
    cfg.out(files::PREDICTIONS_DIR)
        .join(format!("{model}.{}", files::PREDICTIONS_EXT))
}

pub(crate) fn load_prediction_list(paths: &[PathBuf], permissive: bool, min: usize) -> CliResult<Vec<PredictionSet>> {
    if paths.len() < min {
        return Err(usage(format!(
            "need at least {min} prediction file(s), got {}",
            paths.len()
        )));
    }
    paths
        .iter()
        .map(|p| {
            let loaded = load_predictions_with(p, LoadOptions { permissive })?;
            if loaded.clamped > 0 {
                log::warn!("{}: clamped {} scores into [0, 1]", p.display(), loaded.clamped);
            }
            Ok(loaded.predictions)
        })
        .collect()
}

/// Predictions and labels from the config, checked for alignment.
pub(crate) fn load_inputs(cfg: &ExperimentConfig, permissive: bool, min: usize) -> CliResult<(Vec<PredictionSet>, LabelSet)> {
    let preds = load_prediction_list(&cfg.predictions, permissive, min)?;
    let y = load_labels(cfg.labels_path()?)?;
    for p in &preds {
        ensure_pred_labels(p, &y)?;
    }
    Ok((preds, y))
}

/// Restricts predictions and labels to a part of the configured split.
pub(crate) fn restrict(
    cfg: &ExperimentConfig,
    subset: Subset,
    preds: Vec<PredictionSet>,
    y: LabelSet,
) -> CliResult<(Vec<PredictionSet>, LabelSet)> {
    let rows = match subset {
        Subset::All => return Ok((preds, y)),
        Subset::Fit => cfg.split(y.n_examples())?.part_a,
        Subset::Heldout => cfg.split(y.n_examples())?.part_b,
    };
    let preds = preds
        .iter()
        .map(|p| p.select_rows(&rows))
        .collect::<videns_core::Result<_>>()?;
    Ok((preds, y.select_rows(&rows)?))
}

pub(crate) fn model_names(preds: &[PredictionSet]) -> Vec<String> {
    preds.iter().map(|p| p.model_name().to_owned()).collect()
}

pub(crate) fn fmt_gap(v: f64) -> String {
    format!("{v:.10}")
}
