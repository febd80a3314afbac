use std::path::Path;

use serde_json::{Map, Value};

use super::container::{Container, Dtype};
use super::PredictionSet;
use crate::error::{Error, Result};

pub const PREDICTIONS_KIND: &str = "predictions";

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Clamp scores outside [0, 1] instead of rejecting the file.
    pub permissive: bool,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub predictions: PredictionSet,
    /// Number of scores clamped into [0, 1] (always 0 in strict mode).
    pub clamped: usize,
}

pub fn save_predictions(p: &PredictionSet, path: &Path) -> Result<()> {
    let mut manifest = Map::new();
    manifest.insert("kind".into(), Value::from(PREDICTIONS_KIND));
    manifest.insert("model_name".into(), Value::from(p.model_name()));
    manifest.insert("n_examples".into(), Value::from(p.n_examples()));
    manifest.insert("n_classes".into(), Value::from(p.n_classes()));
    Container::from_f32(manifest, p.example_ids().to_vec(), p.scores()).write(path)
}

/// Strict load: any score outside [0, 1] is an error.
pub fn load_predictions(path: &Path) -> Result<PredictionSet> {
    load_predictions_with(path, LoadOptions::default()).map(|l| l.predictions)
}

pub fn load_predictions_with(path: &Path, opts: LoadOptions) -> Result<Loaded> {
    let c = Container::read(path)?;
    if c.kind() != Some(PREDICTIONS_KIND) {
        return Err(Error::format(path, "container kind is not \"predictions\""));
    }
    if c.dtype() != Some(Dtype::F32) {
        return Err(Error::format(path, "prediction payload must be f32"));
    }
    let model_name = c
        .manifest
        .get("model_name")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format(path, "manifest field \"model_name\" missing"))?
        .to_owned();
    let n_examples = c.manifest_usize("n_examples", path)?;
    let n_classes = c.manifest_usize("n_classes", path)?;
    let mut scores = c.f32_values();
    if scores.len() != n_examples * n_classes {
        return Err(Error::SizeMismatch {
            expected: n_examples * n_classes,
            found: scores.len(),
        });
    }
    let mut clamped = 0;
    for (pos, s) in scores.iter_mut().enumerate() {
        let (row, col) = (pos / n_classes, pos % n_classes);
        if !s.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        if !(0.0..=1.0).contains(s) {
            if !opts.permissive {
                return Err(Error::ScoreOutOfRange { row, col, value: *s });
            }
            *s = s.clamp(0.0, 1.0);
            clamped += 1;
        }
    }
    Ok(Loaded {
        predictions: PredictionSet::new(model_name, c.ids, n_classes, scores)?,
        clamped,
    })
}
