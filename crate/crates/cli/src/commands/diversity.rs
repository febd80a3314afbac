use videns_core::diversity::{subset_sweep, write_sweep_csv, MAX_SWEEP_MODELS};
use videns_core::metrics::{oracle_matrix, top_frequency_classes};
use videns_core::OracleMatrix;

use super::load_inputs;
use crate::config::LoadedConfig;
use crate::error::{usage, CliResult};
use crate::provenance::Provenance;

/// Sweep CSV over every subset of the models for the configured classes,
/// written to `diversity_<measure>.csv`.
pub fn run(lc: &LoadedConfig) -> CliResult<()> {
    let cfg = &lc.config;
    let dv = &cfg.diversity;
    if cfg.predictions.len() > MAX_SWEEP_MODELS {
        return Err(usage(format!(
            "{} models exceed the exhaustive sweep cap of {MAX_SWEEP_MODELS}",
            cfg.predictions.len()
        )));
    }
    let (preds, y) = load_inputs(cfg, false, 2)?;
    let oracles = preds
        .iter()
        .map(|p| oracle_matrix(p, &y, dv.threshold))
        .collect::<videns_core::Result<Vec<OracleMatrix>>>()?;
    let classes = match &dv.classes {
        Some(c) => c.clone(),
        None => top_frequency_classes(&y, dv.top_classes),
    };
    log::info!(
        "sweeping {} over {} classes and {} subsets per class",
        dv.measure,
        classes.len(),
        (1usize << preds.len()) - preds.len() - 1
    );
    let curves = subset_sweep(&oracles, &classes, dv.measure)?;
    Provenance::new(lc).write_csv(&cfg.out(&format!("diversity_{}.csv", dv.measure)), |w| {
        write_sweep_csv(&curves, w)
    })
}
