use std::fmt::Write as _;
use std::path::Path;

use videns_core::{apply_weights, average_combine, EnsembleWeights, PredictionSet};

use super::ensemble::part_gaps;
use super::{fmt_gap, load_inputs};
use crate::config::{files, LoadedConfig};
use crate::error::{data, CliResult};
use crate::provenance::Provenance;

#[derive(Debug, Clone)]
struct Row {
    name: String,
    kind: String,
    fit_gap: f64,
    heldout_gap: f64,
}

/// Reorders `preds` to the model order of `w`.
fn in_weight_order(preds: &[PredictionSet], w: &EnsembleWeights, path: &Path) -> CliResult<Vec<PredictionSet>> {
    w.model_names
        .iter()
        .map(|name| {
            preds
                .iter()
                .find(|p| p.model_name() == name)
                .cloned()
                .ok_or_else(|| data(format!("{} needs model {name:?}, which is not among the inputs", path.display())))
        })
        .collect()
}

/// Fit and held-out GAP of every single model, the plain average and each
/// listed weights file, as `report.csv` and `report.md`.
pub fn run(lc: &LoadedConfig) -> CliResult<()> {
    let cfg = &lc.config;
    let k = cfg.eval.k;
    let (preds, y) = load_inputs(cfg, false, 1)?;
    let split = cfg.split(y.n_examples())?;

    let mut rows = Vec::new();
    for p in &preds {
        let (f, h) = part_gaps(p, &y, &split, k)?;
        rows.push(Row { name: p.model_name().to_owned(), kind: "single".into(), fit_gap: f, heldout_gap: h });
    }
    let best_single = rows.iter().map(|r| r.heldout_gap).fold(f64::NEG_INFINITY, f64::max);
    if preds.len() >= 2 {
        let (f, h) = part_gaps(&average_combine(&preds)?, &y, &split, k)?;
        rows.push(Row { name: "average".into(), kind: "average".into(), fit_gap: f, heldout_gap: h });
    }
    let weight_files = if cfg.report.weights.is_empty() {
        Some(cfg.weights_path()).filter(|p| p.exists()).into_iter().collect()
    } else {
        cfg.report.weights.clone()
    };
    for path in &weight_files {
        let w = EnsembleWeights::load(path)?;
        let combined = apply_weights(&in_weight_order(&preds, &w, path)?, &w)?;
        let (f, h) = part_gaps(&combined, &y, &split, k)?;
        let name = path.file_stem().map_or("weights".into(), |s| s.to_string_lossy().into_owned());
        rows.push(Row { name, kind: w.kind.to_string(), fit_gap: f, heldout_gap: h });
    }

    let prov = Provenance::new(lc);
    prov.write_csv(&cfg.out(files::SUMMARY_CSV), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["name", "kind", "fit_gap", "heldout_gap", "heldout_minus_best_single"])?;
        for r in &rows {
            w.write_record([
                r.name.as_str(),
                r.kind.as_str(),
                &fmt_gap(r.fit_gap),
                &fmt_gap(r.heldout_gap),
                &fmt_gap(r.heldout_gap - best_single),
            ])?;
        }
        w.flush().map_err(|e| videns_core::Error::Io {
            path: files::SUMMARY_CSV.into(),
            source: e,
        })
    })?;

    let mut md = format!(
        "\nGAP@{k} on {} fit and {} held-out examples (split seed {}, fraction {}).\n\n",
        split.part_a.len(),
        split.part_b.len(),
        split.seed,
        split.fraction
    );
    md.push_str("| name | kind | fit GAP | held-out GAP | vs best single |\n|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {:.4} | {:+.4} |",
            r.name,
            r.kind,
            r.fit_gap,
            r.heldout_gap,
            r.heldout_gap - best_single
        );
    }
    prov.write_text(&cfg.out(files::SUMMARY_MD), &md)
}
