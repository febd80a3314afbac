//! Experiment configuration files.
//!
//! A config is a JSON object with a `schema_version` and a global `seed`.
//! Relative paths inside it are resolved against the directory holding the
//! config file. Command-line flags may override individual values; every
//! override is logged and folded into the config hash.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use videns_core::combine::{GreedyOptions, MoeHyperParams, MoeKind};
use videns_core::data::{split_examples, SplitSpec};
use videns_core::nets::NetHyperParams;
use videns_core::synth::SynthSpec;
use videns_core::Measure;

use crate::error::{usage, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// File names written into the output directory.
pub mod files {
    pub const TRAIN_FEATURES: &str = "train_features.feats";
    pub const TRAIN_LABELS: &str = "train_labels.csv";
    pub const EVAL_FEATURES: &str = "eval_features.feats";
    pub const EVAL_LABELS: &str = "eval_labels.csv";
    pub const PREDICTIONS_DIR: &str = "predictions";
    pub const MODELS_DIR: &str = "models";
    pub const FAMILY_REPORT: &str = "family_report.json";
    pub const BLOCKS_COMPARISON: &str = "blocks_comparison.csv";
    pub const EVAL_REPORT: &str = "eval_report.json";
    pub const GAP_CSV: &str = "gap.csv";
    pub const CLASS_ACCURACY: &str = "class_accuracy.csv";
    pub const DELTA_A: &str = "delta_a.csv";
    pub const WEIGHTS: &str = "weights.json";
    pub const FIT_REPORT: &str = "fit_report.json";
    pub const FIT_EPOCHS: &str = "fit_epochs.csv";
    pub const ENSEMBLE_PREDICTIONS: &str = "ensemble.preds";
    pub const KAGGLE: &str = "ensemble_kaggle.csv";
    pub const SUMMARY_CSV: &str = "report.csv";
    pub const SUMMARY_MD: &str = "report.md";
    pub const PREDICTIONS_EXT: &str = "preds";
    pub const PARAMS_EXT: &str = "params";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Average,
    Correlation,
    MoeSingle,
    MoePerclass,
    MoeDual,
}

impl Method {
    pub fn moe_kind(self) -> Option<MoeKind> {
        match self {
            Method::MoeSingle => Some(MoeKind::PerModel),
            Method::MoePerclass => Some(MoeKind::PerModelClass),
            Method::MoeDual => Some(MoeKind::DualStream),
            Method::Average | Method::Correlation => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Average => "average",
            Method::Correlation => "correlation",
            Method::MoeSingle => "moe-single",
            Method::MoePerclass => "moe-perclass",
            Method::MoeDual => "moe-dual",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "average" => Ok(Method::Average),
            "correlation" => Ok(Method::Correlation),
            "moe-single" => Ok(Method::MoeSingle),
            "moe-perclass" => Ok(Method::MoePerclass),
            "moe-dual" => Ok(Method::MoeDual),
            other => Err(format!(
                "unknown method {other:?} (expected average, correlation, moe-single, moe-perclass or moe-dual)"
            )),
        }
    }
}

/// Which rows of the example set a command looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    All,
    /// The ensemble-fitting part of the split.
    Fit,
    /// The held-out part of the split.
    Heldout,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::All => "all",
            Subset::Fit => "fit",
            Subset::Heldout => "heldout",
        })
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Subset::All),
            "fit" => Ok(Subset::Fit),
            "heldout" => Ok(Subset::Heldout),
            other => Err(format!("unknown subset {other:?} (expected all, fit or heldout)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub threshold: f64,
    /// Number of most frequent classes in the accuracy report.
    pub report_classes: usize,
    /// Report every class instead of the most frequent ones.
    pub all_classes: bool,
    pub subset: Subset,
    /// Clamp out-of-range scores on load instead of rejecting the file.
    pub permissive: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 20,
            threshold: 0.5,
            report_classes: 100,
            all_classes: false,
            subset: Subset::All,
            permissive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversitySection {
    pub measure: Measure,
    /// Number of most frequent classes swept when `classes` is absent.
    pub top_classes: usize,
    pub classes: Option<Vec<usize>>,
    pub threshold: f64,
}

impl Default for DiversitySection {
    fn default() -> Self {
        Self {
            measure: Measure::Entropy,
            top_classes: 10,
            classes: None,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub method: Method,
    pub hyperparameters: MoeHyperParams,
    pub greedy: GreedyOptions,
    /// Defaults to the global seed.
    pub split_seed: Option<u64>,
    pub split_fraction: f64,
    /// Weights file written by `ensemble fit` and read by `ensemble apply`.
    pub weights: Option<PathBuf>,
    /// Labels the base models were trained on; fitting on overlapping
    /// examples is refused.
    pub base_train_labels: Option<PathBuf>,
    pub allow_overlap: bool,
    pub kaggle: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            method: Method::Average,
            hyperparameters: MoeHyperParams::default(),
            greedy: GreedyOptions::default(),
            split_seed: None,
            split_fraction: 0.5,
            weights: None,
            base_train_labels: None,
            allow_overlap: false,
            kaggle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Default to the files written by `synth` in the output directory.
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub heldout_features: Option<PathBuf>,
    pub heldout_labels: Option<PathBuf>,
    /// Features to predict on; defaults to the held-out features.
    pub predict_features: Option<PathBuf>,
    pub model_name: String,
    pub hidden_dims: Vec<usize>,
    pub n_resnet_blocks: usize,
    pub dropout_rate: f64,
    pub use_gated_output: bool,
    pub gate_bias: bool,
    pub hyperparameters: NetHyperParams,
    /// Train one network per listed block count.
    pub blocks_sweep: Option<Vec<usize>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            features: None,
            labels: None,
            heldout_features: None,
            heldout_labels: None,
            predict_features: None,
            model_name: "toynet".into(),
            hidden_dims: vec![64],
            n_resnet_blocks: 1,
            dropout_rate: 0.0,
            use_gated_output: true,
            gate_bias: true,
            hyperparameters: NetHyperParams::default(),
            blocks_sweep: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Weights files compared in the summary; defaults to the ensemble
    /// weights file when it exists.
    pub weights: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub predictions: Vec<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub diversity: DiversitySection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

/// A parsed config together with what is needed for provenance.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    raw: serde_json::Value,
    source: Vec<u8>,
    overrides: Vec<String>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let source = fs::read(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_bytes(source, path.parent().unwrap_or(Path::new("")))
    }

    /// Parses config bytes, resolving relative paths against `base`.
    pub fn from_bytes(source: Vec<u8>, base: &Path) -> CliResult<Self> {
        let raw: serde_json::Value =
            serde_json::from_slice(&source).map_err(|e| usage(format!("config is not valid JSON: {e}")))?;
        match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(usage(format!("unsupported config schema_version {v} (expected {SCHEMA_VERSION})"))),
            None => return Err(usage("config lacks an integer schema_version")),
        }
        if raw.get("seed").and_then(serde_json::Value::as_u64).is_none() {
            return Err(usage("config lacks an integer seed"));
        }
        let mut config: ExperimentConfig =
            serde_json::from_value(raw.clone()).map_err(|e| usage(format!("invalid config: {e}")))?;
        config.resolve_paths(base);
        Ok(Self {
            config,
            raw,
            source,
            overrides: Vec::new(),
        })
    }

    /// Records a flag that replaced a config value.
    pub fn note_override(&mut self, key: &str, old: impl fmt::Debug, new: impl fmt::Debug) {
        log::info!("flag overrides {key}: {old:?} -> {new:?}");
        self.overrides.push(format!("{key}={new:?}"));
    }

    /// True if the config file itself sets the value at the JSON pointer.
    pub fn sets(&self, pointer: &str) -> bool {
        self.raw.pointer(pointer).is_some()
    }

    /// SHA-256 over the config bytes followed by the applied overrides.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(&self.source);
        for o in &self.overrides {
            h.update(b"\n");
            h.update(o.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl ExperimentConfig {
    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        self.predictions.iter_mut().for_each(|p| resolve(base, p));
        resolve_opt(base, &mut self.labels);
        resolve_opt(base, &mut self.ensemble.weights);
        resolve_opt(base, &mut self.ensemble.base_train_labels);
        self.report.weights.iter_mut().for_each(|p| resolve(base, p));
        if let Some(t) = &mut self.train {
            for p in [
                &mut t.features,
                &mut t.labels,
                &mut t.heldout_features,
                &mut t.heldout_labels,
                &mut t.predict_features,
            ] {
                resolve_opt(base, p);
            }
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn split_seed(&self) -> u64 {
        self.ensemble.split_seed.unwrap_or(self.seed)
    }

    pub fn split(&self, n_examples: usize) -> CliResult<SplitSpec> {
        Ok(split_examples(n_examples, self.split_seed(), self.ensemble.split_fraction)?)
    }

    pub fn weights_path(&self) -> PathBuf {
        self.ensemble.weights.clone().unwrap_or_else(|| self.out(files::WEIGHTS))
    }

    pub fn labels_path(&self) -> CliResult<&Path> {
        self.labels
            .as_deref()
            .ok_or_else(|| usage("no labels file given (config `labels` or --labels)"))
    }
}
