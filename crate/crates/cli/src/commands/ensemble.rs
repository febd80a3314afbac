use std::collections::HashSet;
use std::path::PathBuf;

use serde_json::json;
use videns_core::combine::{greedy_correlation_ensemble, moe_fit, WeightsMetadata};
use videns_core::data::{load_labels, save_predictions, write_kaggle_csv, SplitSpec};
use videns_core::{apply_weights, gap_at_k, EnsembleWeights, LabelSet, PredictionSet, SelectRows};

use super::{load_inputs, load_prediction_list, model_names};
use crate::config::{files, ExperimentConfig, LoadedConfig, Method};
use crate::error::{data, usage, CliResult};
use crate::provenance::Provenance;

/// GAP of `p` on the fit and held-out parts of `split`.
pub(crate) fn part_gaps(p: &PredictionSet, y: &LabelSet, split: &SplitSpec, k: usize) -> CliResult<(f64, f64)> {
    let gap = |rows: &[usize]| -> CliResult<f64> { Ok(gap_at_k(&p.select_rows(rows)?, &y.select_rows(rows)?, k)?) };
    Ok((gap(&split.part_a)?, gap(&split.part_b)?))
}

fn base_train_labels(cfg: &ExperimentConfig) -> Option<PathBuf> {
    cfg.ensemble
        .base_train_labels
        .clone()
        .or_else(|| cfg.train.as_ref().and_then(|t| t.labels.clone()))
        .or_else(|| Some(cfg.out(files::TRAIN_LABELS)).filter(|p| p.exists()))
}

/// Refuses to fit on examples the base models were trained on.
fn check_overlap(cfg: &ExperimentConfig, y: &LabelSet) -> CliResult<()> {
    let Some(path) = base_train_labels(cfg) else {
        return Ok(());
    };
    let base = load_labels(&path)?;
    let seen: HashSet<&str> = base.example_ids().iter().map(String::as_str).collect();
    let overlap = y.example_ids().iter().filter(|id| seen.contains(id.as_str())).count();
    if overlap == 0 {
        return Ok(());
    }
    let msg = format!(
        "{overlap} of the {} fitting examples also appear in the base-model training labels {}",
        y.n_examples(),
        path.display()
    );
    if cfg.ensemble.allow_overlap {
        log::warn!("{msg}; fitting anyway");
        Ok(())
    } else {
        Err(data(format!("{msg}; pass --allow-overlap to fit anyway")))
    }
}

/// Learns weights on the fit part of the split and reports held-out GAP.
pub fn fit(lc: &LoadedConfig, lambda_given: bool) -> CliResult<()> {
    let cfg = &lc.config;
    let e = &cfg.ensemble;
    if lambda_given && e.method != Method::MoeDual {
        log::warn!("lambda only affects moe-dual and is ignored by {}", e.method);
    }
    let (preds, y) = load_inputs(cfg, false, 2)?;
    check_overlap(cfg, &y)?;
    let split = cfg.split(y.n_examples())?;
    if split.part_a.is_empty() || split.part_b.is_empty() {
        return Err(usage(format!(
            "split fraction {} leaves an empty part of {} examples",
            e.split_fraction,
            y.n_examples()
        )));
    }
    let prov = Provenance::new(lc);
    let names = model_names(&preds);
    let common = json!({
        "method": e.method,
        "model_names": names,
        "split_seed": split.seed,
        "split_fraction": split.fraction,
        "n_fit": split.part_a.len(),
        "n_heldout": split.part_b.len(),
    });

    let (weights, fit_gap, heldout_gap, details) = match e.method {
        Method::Average => {
            let w = EnsembleWeights::average(names.clone());
            let (f, h) = part_gaps(&apply_weights(&preds, &w)?, &y, &split, e.hyperparameters.gap_k)?;
            (w, f, h, json!({}))
        }
        Method::Correlation => {
            let fit_preds = preds
                .iter()
                .map(|p| p.select_rows(&split.part_a))
                .collect::<videns_core::Result<Vec<_>>>()?;
            let (w, trace) = greedy_correlation_ensemble(&fit_preds, &y.select_rows(&split.part_a)?, &e.greedy)?;
            let (_, h) = part_gaps(&apply_weights(&preds, &w)?, &y, &split, e.greedy.k)?;
            log::info!("greedy order {:?}", trace.order);
            (w, trace.final_gap(), h, json!({ "options": e.greedy, "trace": trace }))
        }
        Method::MoeSingle | Method::MoePerclass | Method::MoeDual => {
            let kind = e.method.moe_kind().expect("trained method");
            let report = moe_fit(&preds, &y, kind, &e.hyperparameters, &split, cfg.seed)?;
            prov.write_csv(&cfg.out(files::FIT_EPOCHS), |w| report.write_epoch_csv(w))?;
            let last = report.last();
            (
                report.final_weights.clone(),
                last.train_gap,
                last.heldout_gap,
                json!({ "fit_report": report }),
            )
        }
    };

    let hyper = match e.method {
        Method::Average => json!({}),
        Method::Correlation => json!(e.greedy),
        _ => json!(e.hyperparameters),
    };
    let weights = weights.with_metadata(WeightsMetadata {
        seed: Some(cfg.seed),
        hyperparameters: json!({ "method": e.method, "split_seed": split.seed, "split_fraction": split.fraction, "settings": hyper }),
    });
    let weights_path = cfg.weights_path();
    if let Some(dir) = weights_path.parent() {
        super::ensure_dir(dir)?;
    }
    weights.save(&weights_path)?;
    log::info!("{}: fit GAP {fit_gap:.6}, held-out GAP {heldout_gap:.6}", e.method);

    let mut body = common;
    let obj = body.as_object_mut().expect("object literal");
    obj.insert("fit_gap".into(), json!(fit_gap));
    obj.insert("heldout_gap".into(), json!(heldout_gap));
    obj.insert("weights".into(), json!(weights));
    if let serde_json::Value::Object(extra) = details {
        obj.extend(extra);
    }
    prov.write_json(&cfg.out(files::FIT_REPORT), body)
}

/// Combines the configured prediction sets with stored weights.
pub fn apply(lc: &LoadedConfig) -> CliResult<()> {
    let cfg = &lc.config;
    let weights = EnsembleWeights::load(&cfg.weights_path())?;
    let preds = load_prediction_list(&cfg.predictions, false, 1)?;
    let combined = apply_weights(&preds, &weights)?;
    let out = cfg.out(files::ENSEMBLE_PREDICTIONS);
    super::ensure_dir(&cfg.output_dir)?;
    save_predictions(&combined, &out)?;
    log::info!("wrote {} combined rows to {}", combined.n_examples(), out.display());
    if cfg.ensemble.kaggle {
        write_kaggle_csv(&combined, &cfg.out(files::KAGGLE))?;
    }
    Ok(())
}
