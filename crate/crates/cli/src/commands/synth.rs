use serde_json::json;
use videns_core::data::save_labels;
use videns_core::data::save_predictions;
use videns_core::nets::save_features;
use videns_core::synth::{gen_dataset, gen_predictor_family};

use super::{ensure_dir, prediction_path};
use crate::config::{files, LoadedConfig};
use crate::error::{usage, CliResult};
use crate::provenance::Provenance;

/// Writes train/eval features and labels, one prediction file per family
/// member (on the eval part) and the family report.
pub fn run(lc: &LoadedConfig) -> CliResult<()> {
    let cfg = &lc.config;
    let mut spec = cfg
        .synth
        .clone()
        .ok_or_else(|| usage("config has no `synth` section"))?;
    if lc.sets("/synth/seed") && spec.seed != cfg.seed {
        log::warn!("synth.seed {} is replaced by the global seed {}", spec.seed, cfg.seed);
    }
    spec.seed = cfg.seed;
    if spec.family.is_empty() {
        return Err(usage("synth.family lists no predictors"));
    }

    log::info!(
        "generating {} training and {} evaluation examples over {} classes",
        spec.n_train,
        spec.n_examples,
        spec.n_classes
    );
    let dataset = gen_dataset(&spec)?;
    log::info!("training {} family members", spec.family.len());
    let family = gen_predictor_family(&spec, &dataset)?;

    ensure_dir(&cfg.out(files::PREDICTIONS_DIR))?;
    for (part, feats, labels) in [
        (&dataset.train, files::TRAIN_FEATURES, files::TRAIN_LABELS),
        (&dataset.eval, files::EVAL_FEATURES, files::EVAL_LABELS),
    ] {
        let x = part.all_features()?;
        save_features(part.labels.example_ids(), x.view(), &cfg.out(feats))?;
        save_labels(&part.labels, &cfg.out(labels))?;
    }
    for p in &family.predictions {
        save_predictions(p, &prediction_path(cfg, p.model_name()))?;
    }
    for m in &family.report.members {
        log::info!("{}: eval GAP {:.4} after {} regenerations", m.name, m.eval_gap, m.regenerations);
    }
    Provenance::new(lc).write_json(
        &cfg.out(files::FAMILY_REPORT),
        json!({ "spec": spec, "family": family.report }),
    )
}
