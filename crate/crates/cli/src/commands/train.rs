use std::path::{Path, PathBuf};

use serde::Serialize;
use videns_core::data::{ensure_aligned, load_labels, save_predictions};
use videns_core::metrics::gap_at_k;
use videns_core::nets::{fcrn_train, load_features, predict, Dataset, ToyNetConfig};
use videns_core::rng::{stream, sub_seed};

use super::{ensure_dir, fmt_gap, prediction_path};
use crate::config::{files, ExperimentConfig, LoadedConfig, TrainSection};
use crate::error::{usage, CliResult};
use crate::provenance::Provenance;

/// One row of the block-count comparison.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub model_name: String,
    pub n_resnet_blocks: usize,
    pub n_params: usize,
    pub final_loss: f64,
    pub train_gap: f64,
    pub heldout_gap: Option<f64>,
}

fn load_dataset(features: &Path, labels: &Path) -> CliResult<Dataset> {
    let (ids, x) = load_features(features)?;
    let y = load_labels(labels)?;
    ensure_aligned(&ids, y.example_ids())?;
    Ok(Dataset::new(x, y)?)
}

fn or_existing(explicit: &Option<PathBuf>, cfg: &ExperimentConfig, name: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| Some(cfg.out(name)).filter(|p| p.exists()))
}

/// Trains one network, or one per entry of the block sweep, on stored
/// features. Writes parameters, a training log and predictions for each,
/// plus a comparison table when sweeping.
pub fn run(lc: &LoadedConfig) -> CliResult<()> {
    let cfg = &lc.config;
    let t: TrainSection = cfg.train.clone().unwrap_or_default();
    let prov = Provenance::new(lc);

    let features = t.features.clone().unwrap_or_else(|| cfg.out(files::TRAIN_FEATURES));
    let labels = t.labels.clone().unwrap_or_else(|| cfg.out(files::TRAIN_LABELS));
    let train = load_dataset(&features, &labels)?;
    let heldout = match (
        or_existing(&t.heldout_features, cfg, files::EVAL_FEATURES),
        or_existing(&t.heldout_labels, cfg, files::EVAL_LABELS),
    ) {
        (Some(f), Some(l)) => Some(load_dataset(&f, &l)?),
        (None, None) => None,
        _ => return Err(usage("held-out features and labels must be given together")),
    };
    let predict_on = match &t.predict_features {
        Some(p) => Some(load_features(p)?),
        None => or_existing(&t.heldout_features, cfg, files::EVAL_FEATURES)
            .map(|p| load_features(&p))
            .transpose()?,
    };

    let sweep: Vec<Option<usize>> = match &t.blocks_sweep {
        Some(b) if !b.is_empty() => b.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let models_dir = cfg.out(files::MODELS_DIR);
    ensure_dir(&models_dir)?;
    ensure_dir(&cfg.out(files::PREDICTIONS_DIR))?;

    let mut summaries = Vec::new();
    for (i, blocks) in sweep.iter().enumerate() {
        let name = match blocks {
            Some(b) => format!("{}_b{b}", t.model_name),
            None => t.model_name.clone(),
        };
        let net = ToyNetConfig {
            input_dim: train.features.ncols(),
            hidden_dims: t.hidden_dims.clone(),
            n_resnet_blocks: blocks.unwrap_or(t.n_resnet_blocks),
            dropout_rate: t.dropout_rate,
            n_classes: train.labels.n_classes(),
            use_gated_output: t.use_gated_output,
            gate_bias: t.gate_bias,
            seed: sub_seed(cfg.seed, stream::CLI_TRAIN, 2 * i as u64),
        };
        log::info!("training {name} ({} residual blocks)", net.n_resnet_blocks);
        let train_seed = sub_seed(cfg.seed, stream::CLI_TRAIN, 2 * i as u64 + 1);
        let (params, log) = fcrn_train(&net, &train, heldout.as_ref(), &t.hyperparameters, train_seed)?;

        params.save(&net, &models_dir.join(format!("{name}.{}", files::PARAMS_EXT)))?;
        prov.write_csv(&models_dir.join(format!("{name}_log.csv")), |w| log.write_csv(w))?;
        if let Some((ids, x)) = &predict_on {
            save_predictions(&predict(&params, x.view(), ids.clone(), &name)?, &prediction_path(cfg, &name))?;
        }

        let k = t.hyperparameters.gap_k;
        let train_preds = predict(&params, train.features.view(), train.labels.example_ids().to_vec(), &name)?;
        let heldout_gap = heldout
            .as_ref()
            .map(|h| {
                let p = predict(&params, h.features.view(), h.labels.example_ids().to_vec(), &name)?;
                gap_at_k(&p, &h.labels, k)
            })
            .transpose()?;
        summaries.push(TrainSummary {
            model_name: name,
            n_resnet_blocks: net.n_resnet_blocks,
            n_params: params.n_params(),
            final_loss: log.epochs.last().map_or(f64::NAN, |e| e.loss),
            train_gap: gap_at_k(&train_preds, &train.labels, k)?,
            heldout_gap,
        });
    }

    if t.blocks_sweep.is_some() {
        prov.write_csv(&cfg.out(files::BLOCKS_COMPARISON), |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["model", "n_resnet_blocks", "n_params", "final_loss", "train_gap", "heldout_gap"])?;
            for s in &summaries {
                w.write_record([
                    s.model_name.clone(),
                    s.n_resnet_blocks.to_string(),
                    s.n_params.to_string(),
                    fmt_gap(s.final_loss),
                    fmt_gap(s.train_gap),
                    s.heldout_gap.map(fmt_gap).unwrap_or_default(),
                ])?;
            }
            w.flush().map_err(|e| videns_core::Error::Io {
                path: files::BLOCKS_COMPARISON.into(),
                source: e,
            })
        })?;
    }
    for s in &summaries {
        log::info!(
            "{}: loss {:.5}, train GAP {:.4}, held-out GAP {}",
            s.model_name,
            s.final_loss,
            s.train_gap,
            s.heldout_gap.map_or("n/a".into(), |g| format!("{g:.4}"))
        );
    }
    Ok(())
}
