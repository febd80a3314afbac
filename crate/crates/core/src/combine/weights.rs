use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ensure_all_aligned, PredictionSet};
use crate::error::{Error, Result};

pub const ENSEMBLE_MODEL_NAME: &str = "ensemble";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Average,
    PerModel,
    PerModelClass,
    DualStream,
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightKind::Average => "average",
            WeightKind::PerModel => "per_model",
            WeightKind::PerModelClass => "per_model_class",
            WeightKind::DualStream => "dual_stream",
        })
    }
}

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(WeightKind::Average),
            "per_model" => Ok(WeightKind::PerModel),
            "per_model_class" => Ok(WeightKind::PerModelClass),
            "dual_stream" => Ok(WeightKind::DualStream),
            other => Err(Error::InvalidArgument(format!("unknown weight kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightsMetadata {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

/// Linear combination coefficients for an ordered list of models.
///
/// * `average`: `alpha` is `1/D` for every model.
/// * `per_model`: one scalar per model.
/// * `per_model_class`: `alpha` is empty; `residual[i][c]` is the coefficient
///   of model `i` on class `c`.
/// * `dual_stream`: the coefficient of model `i` on class `c` is
///   `alpha[i] + residual[i][c]`.
///
/// Coefficients may be negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub kind: WeightKind,
    pub model_names: Vec<String>,
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub metadata: WeightsMetadata,
}

impl EnsembleWeights {
    pub fn average(model_names: Vec<String>) -> Self {
        let d = model_names.len().max(1) as f64;
        Self {
            kind: WeightKind::Average,
            alpha: vec![1.0 / d; model_names.len()],
            model_names,
            residual: None,
            metadata: WeightsMetadata::default(),
        }
    }

    pub fn per_model(model_names: Vec<String>, alpha: Vec<f64>) -> Self {
        Self {
            kind: WeightKind::PerModel,
            model_names,
            alpha,
            residual: None,
            metadata: WeightsMetadata::default(),
        }
    }

    pub fn per_model_class(model_names: Vec<String>, coefficients: Vec<Vec<f64>>) -> Self {
        Self {
            kind: WeightKind::PerModelClass,
            model_names,
            alpha: Vec::new(),
            residual: Some(coefficients),
            metadata: WeightsMetadata::default(),
        }
    }

    pub fn dual_stream(model_names: Vec<String>, alpha: Vec<f64>, residual: Vec<Vec<f64>>) -> Self {
        Self {
            kind: WeightKind::DualStream,
            model_names,
            alpha,
            residual: Some(residual),
            metadata: WeightsMetadata::default(),
        }
    }

    pub fn with_metadata(mut self, metadata: WeightsMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    /// Checks the kind-specific shape rules; `n_classes` additionally checks
    /// the width of any per-class matrix.
    pub fn validate(&self, n_classes: Option<usize>) -> Result<()> {
        let d = self.model_names.len();
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if d == 0 {
            return bad("weights name no models".into());
        }
        let needs_alpha = !matches!(self.kind, WeightKind::PerModelClass);
        if needs_alpha && self.alpha.len() != d {
            return bad(format!("{} alpha values for {d} models", self.alpha.len()));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return bad("alpha contains non-finite values".into());
        }
        if self.kind == WeightKind::Average
            && self.alpha.iter().any(|&a| (a - 1.0 / d as f64).abs() > 1e-12)
        {
            return bad("average weights must all equal 1/D".into());
        }
        match (&self.residual, self.kind) {
            (None, WeightKind::PerModelClass | WeightKind::DualStream) => {
                return bad(format!("{} weights need a per-class matrix", self.kind));
            }
            (Some(_), WeightKind::Average | WeightKind::PerModel) => {
                return bad(format!("{} weights must not carry a per-class matrix", self.kind));
            }
            (Some(m), _) => {
                if m.len() != d {
                    return bad(format!("per-class matrix has {} rows for {d} models", m.len()));
                }
                let width = m[0].len();
                if m.iter().any(|r| r.len() != width) {
                    return bad("per-class matrix rows differ in length".into());
                }
                if let Some(c) = n_classes {
                    if width != c {
                        return Err(Error::Dimension(format!(
                            "per-class matrix has {width} columns for {c} classes"
                        )));
                    }
                }
                if m.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("per-class matrix contains non-finite values".into());
                }
            }
            (None, _) => {}
        }
        Ok(())
    }

    /// Effective D x C coefficient matrix.
    pub fn coefficients(&self, n_classes: usize) -> Vec<Vec<f64>> {
        (0..self.model_names.len())
            .map(|i| match self.kind {
                WeightKind::Average | WeightKind::PerModel => vec![self.alpha[i]; n_classes],
                WeightKind::PerModelClass => self.residual.as_ref().expect("validated")[i].clone(),
                WeightKind::DualStream => self.residual.as_ref().expect("validated")[i]
                    .iter()
                    .map(|r| self.alpha[i] + r)
                    .collect(),
            })
            .collect()
    }

    /// Per-model summary: `alpha` for scalar kinds, the mean of the per-class
    /// row for `per_model_class`, and the mean total coefficient for
    /// `dual_stream`.
    pub fn per_model_means(&self) -> Vec<f64> {
        let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len().max(1) as f64;
        match (&self.residual, self.kind) {
            (Some(m), WeightKind::PerModelClass) => m.iter().map(|r| mean(r)).collect(),
            (Some(m), WeightKind::DualStream) => {
                self.alpha.iter().zip(m).map(|(a, r)| a + mean(r)).collect()
            }
            _ => self.alpha.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        w.validate(None)?;
        Ok(w)
    }
}

/// Combined score of example row `row` under a D x C coefficient matrix,
/// accumulated in model order.
#[inline]
pub(crate) fn combine_into(preds: &[&PredictionSet], coef: &[Vec<f64>], row: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (p, w) in preds.iter().zip(coef) {
        for ((o, &s), &wc) in out.iter_mut().zip(p.row(row)).zip(w) {
            *o += wc * f64::from(s);
        }
    }
}

/// Combined `f32` scores for the listed rows (all rows when `rows` is `None`).
pub(crate) fn combine_rows(preds: &[&PredictionSet], coef: &[Vec<f64>], rows: Option<&[usize]>) -> Vec<f32> {
    let c = preds[0].n_classes();
    let n = rows.map_or(preds[0].n_examples(), <[usize]>::len);
    let mut out = Vec::with_capacity(n * c);
    let mut buf = vec![0.0; c];
    for r in 0..n {
        let row = rows.map_or(r, |idx| idx[r]);
        combine_into(preds, coef, row, &mut buf);
        out.extend(buf.iter().map(|&v| v as f32));
    }
    out
}

fn check_names(preds: &[PredictionSet], w: &EnsembleWeights) -> Result<()> {
    let names: Vec<&str> = preds.iter().map(PredictionSet::model_name).collect();
    if names.len() != w.model_names.len() || names.iter().zip(&w.model_names).any(|(a, b)| a != b) {
        return Err(Error::Misaligned(format!(
            "weights are for models {:?} but predictions are from {:?}",
            w.model_names, names
        )));
    }
    Ok(())
}

/// Applies the weights to prediction sets listed in `w.model_names` order.
/// The output is not clamped.
pub fn apply_weights(preds: &[PredictionSet], w: &EnsembleWeights) -> Result<PredictionSet> {
    ensure_all_aligned(preds)?;
    check_names(preds, w)?;
    let c = preds[0].n_classes();
    w.validate(Some(c))?;
    let refs: Vec<&PredictionSet> = preds.iter().collect();
    let scores = combine_rows(&refs, &w.coefficients(c), None);
    PredictionSet::new(ENSEMBLE_MODEL_NAME, preds[0].example_ids().to_vec(), c, scores)
}

/// Elementwise mean of the prediction sets.
pub fn average_combine(preds: &[PredictionSet]) -> Result<PredictionSet> {
    ensure_all_aligned(preds)?;
    let names = preds.iter().map(|p| p.model_name().to_owned()).collect();
    apply_weights(preds, &EnsembleWeights::average(names))
}
