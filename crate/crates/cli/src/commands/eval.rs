use serde::Serialize;
use videns_core::metrics::{class_accuracy_report, oracle_matrix, top_frequency_classes, ClassAccuracyReport};
use videns_core::{gap_at_k, OracleMatrix};

use super::{fmt_gap, load_inputs, restrict};
use crate::config::{files, LoadedConfig, Subset};
use crate::error::CliResult;
use crate::provenance::Provenance;

#[derive(Debug, Clone, Serialize)]
pub struct ModelGap {
    pub model: String,
    pub gap: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    k: usize,
    threshold: f64,
    subset: Subset,
    n_examples: usize,
    n_classes: usize,
    gap: &'a [ModelGap],
    class_accuracy: Option<&'a ClassAccuracyReport>,
}

/// GAP@k per model; with two or more models also the per-class accuracy
/// report and the deviation matrix.
pub fn run(lc: &LoadedConfig) -> CliResult<()> {
    let cfg = &lc.config;
    let ev = &cfg.eval;
    let (preds, y) = load_inputs(cfg, ev.permissive, 1)?;
    let (preds, y) = restrict(cfg, ev.subset, preds, y)?;
    let prov = Provenance::new(lc);

    let gaps = preds
        .iter()
        .map(|p| {
            Ok(ModelGap {
                model: p.model_name().to_owned(),
                gap: gap_at_k(p, &y, ev.k)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    for g in &gaps {
        log::info!("{}: GAP@{} = {:.6}", g.model, ev.k, g.gap);
    }
    prov.write_csv(&cfg.out(files::GAP_CSV), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["model", "gap"])?;
        for g in &gaps {
            w.write_record([g.model.as_str(), &fmt_gap(g.gap)])?;
        }
        w.flush().map_err(|e| videns_core::Error::Io {
            path: files::GAP_CSV.into(),
            source: e,
        })
    })?;

    let report = if preds.len() >= 2 {
        let oracles = preds
            .iter()
            .map(|p| oracle_matrix(p, &y, ev.threshold))
            .collect::<videns_core::Result<Vec<OracleMatrix>>>()?;
        let classes = (!ev.all_classes).then(|| top_frequency_classes(&y, ev.report_classes));
        let mut report = class_accuracy_report(&oracles, classes.as_deref())?;
        report.attach_positive_rates(&y);
        prov.write_csv(&cfg.out(files::CLASS_ACCURACY), |w| report.write_csv(w))?;
        prov.write_csv(&cfg.out(files::DELTA_A), |w| report.write_delta_a_csv(w))?;
        Some(report)
    } else {
        log::info!("one model given; skipping the per-class accuracy report");
        None
    };

    prov.write_json(
        &cfg.out(files::EVAL_REPORT),
        EvalReport {
            k: ev.k,
            threshold: ev.threshold,
            subset: ev.subset,
            n_examples: y.n_examples(),
            n_classes: y.n_classes(),
            gap: &gaps,
            class_accuracy: report.as_ref(),
        },
    )
}
