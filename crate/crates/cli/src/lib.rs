//! The `videns` command-line driver.
//!
//! Every subcommand reads an [`config::ExperimentConfig`], applies flag
//! overrides, and writes its outputs into the configured output directory.
//! Report files start with a provenance header naming the tool version, the
//! config hash and the seed.

use std::ffi::OsString;
use std::fmt::Debug;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;

use config::{ExperimentConfig, LoadedConfig, Method, Subset};
use error::{usage, CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "videns", version, about = "Evaluate, analyse and combine multi-label prediction ensembles")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Prediction files, replacing the config list.
    #[arg(long = "predictions", short = 'p', num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and a trained predictor family.
    Synth(SynthArgs),
    /// Train a gated residual network on stored features.
    Train(TrainArgs),
    /// GAP, per-class accuracy report and deviation matrix.
    Eval(EvalArgs),
    /// Exhaustive diversity sweep over model subsets.
    Diversity(DiversityArgs),
    /// Fit or apply ensemble weights.
    #[command(subcommand)]
    Ensemble(EnsembleCommand),
    /// Held-out comparison of single models, averaging and fitted ensembles.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Train one network per block count, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    pub blocks_sweep: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report every class rather than the most frequent ones.
    #[arg(long)]
    pub all_classes: bool,
    /// all, fit or heldout.
    #[arg(long)]
    pub subset: Option<Subset>,
    /// Clamp out-of-range scores instead of rejecting them.
    #[arg(long)]
    pub permissive: bool,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// entropy or kappa.
    #[arg(long)]
    pub measure: Option<String>,
    #[arg(long)]
    pub top_classes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum EnsembleCommand {
    /// Learn combination weights on the fit part of the split.
    Fit(FitArgs),
    /// Combine prediction sets with stored weights.
    Apply(ApplyArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// average, correlation, moe-single, moe-perclass or moe-dual.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Residual penalty of the dual-stream combiner.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub split_fraction: Option<f64>,
    /// Output weights file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Allow fitting on examples the base models were trained on.
    #[arg(long)]
    pub allow_overlap: bool,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Prediction files, replacing the config list.
    #[arg(long = "predictions", short = 'p', num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Also write a Kaggle-style top-20 CSV.
    #[arg(long)]
    pub kaggle: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Weights files to compare, replacing the config list.
    #[arg(long, num_args = 1..)]
    pub weights: Vec<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("videns: error: {e}");
            e.exit_code()
        }
    }
}

fn set<T: Debug + Clone>(
    lc: &mut LoadedConfig,
    key: &str,
    flag: Option<T>,
    slot: for<'a> fn(&'a mut ExperimentConfig) -> &'a mut T,
) {
    if let Some(v) = flag {
        let old = std::mem::replace(slot(&mut lc.config), v.clone());
        lc.note_override(key, old, v);
    }
}

fn load(common: &Common) -> CliResult<LoadedConfig> {
    let mut lc = LoadedConfig::load(&common.config)?;
    set(&mut lc, "seed", common.seed, |c| &mut c.seed);
    set(&mut lc, "output_dir", common.output_dir.clone(), |c| &mut c.output_dir);
    Ok(lc)
}

fn set_inputs(lc: &mut LoadedConfig, inputs: &Inputs) {
    let preds = (!inputs.predictions.is_empty()).then(|| inputs.predictions.clone());
    set(lc, "predictions", preds, |c| &mut c.predictions);
    set(lc, "labels", inputs.labels.clone().map(Some), |c| &mut c.labels);
}

fn flag(on: bool) -> Option<bool> {
    on.then_some(true)
}

fn init_threads(lc: &LoadedConfig, flag: Option<usize>) -> CliResult<()> {
    let Some(n) = flag.or(lc.config.threads) else {
        return Ok(());
    };
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    // A pool may already exist when commands run in-process more than once.
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok() {
        log::info!("using {n} worker threads");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => {
            let lc = load(&a.common)?;
            init_threads(&lc, cli.threads)?;
            commands::synth::run(&lc)
        }
        Command::Train(a) => {
            let mut lc = load(&a.common)?;
            if a.blocks_sweep.is_some() || a.epochs.is_some() || a.lr.is_some() {
                lc.config.train.get_or_insert_with(Default::default);
            }
            set(&mut lc, "train.blocks_sweep", a.blocks_sweep.map(Some), |c| {
                &mut c.train.as_mut().expect("train section inserted").blocks_sweep
            });
            set(&mut lc, "train.hyperparameters.epochs", a.epochs, |c| {
                &mut c.train.as_mut().expect("train section inserted").hyperparameters.epochs
            });
            set(&mut lc, "train.hyperparameters.learning_rate", a.lr, |c| {
                &mut c.train.as_mut().expect("train section inserted").hyperparameters.learning_rate
            });
            init_threads(&lc, cli.threads)?;
            commands::train::run(&lc)
        }
        Command::Eval(a) => {
            let mut lc = load(&a.common)?;
            set_inputs(&mut lc, &a.inputs);
            set(&mut lc, "eval.k", a.k, |c| &mut c.eval.k);
            set(&mut lc, "eval.threshold", a.threshold, |c| &mut c.eval.threshold);
            set(&mut lc, "eval.all_classes", flag(a.all_classes), |c| &mut c.eval.all_classes);
            set(&mut lc, "eval.subset", a.subset, |c| &mut c.eval.subset);
            set(&mut lc, "eval.permissive", flag(a.permissive), |c| &mut c.eval.permissive);
            init_threads(&lc, cli.threads)?;
            commands::eval::run(&lc)
        }
        Command::Diversity(a) => {
            let mut lc = load(&a.common)?;
            set_inputs(&mut lc, &a.inputs);
            let measure = a
                .measure
                .map(|m| m.parse())
                .transpose()
                .map_err(|e: videns_core::Error| usage(e.to_string()))?;
            set(&mut lc, "diversity.measure", measure, |c| &mut c.diversity.measure);
            set(&mut lc, "diversity.top_classes", a.top_classes, |c| &mut c.diversity.top_classes);
            set(&mut lc, "diversity.classes", a.classes.map(Some), |c| &mut c.diversity.classes);
            set(&mut lc, "diversity.threshold", a.threshold, |c| &mut c.diversity.threshold);
            init_threads(&lc, cli.threads)?;
            commands::diversity::run(&lc)
        }
        Command::Ensemble(EnsembleCommand::Fit(a)) => {
            let mut lc = load(&a.common)?;
            set_inputs(&mut lc, &a.inputs);
            set(&mut lc, "ensemble.method", a.method, |c| &mut c.ensemble.method);
            set(&mut lc, "ensemble.hyperparameters.learning_rate", a.lr, |c| {
                &mut c.ensemble.hyperparameters.learning_rate
            });
            set(&mut lc, "ensemble.hyperparameters.epochs", a.epochs, |c| {
                &mut c.ensemble.hyperparameters.epochs
            });
            set(&mut lc, "ensemble.hyperparameters.batch_size", a.batch_size, |c| {
                &mut c.ensemble.hyperparameters.batch_size
            });
            let lambda_flag = a.lambda.is_some();
            set(&mut lc, "ensemble.hyperparameters.lambda", a.lambda, |c| {
                &mut c.ensemble.hyperparameters.lambda
            });
            set(&mut lc, "ensemble.split_seed", a.split_seed.map(Some), |c| &mut c.ensemble.split_seed);
            set(&mut lc, "ensemble.split_fraction", a.split_fraction, |c| &mut c.ensemble.split_fraction);
            set(&mut lc, "ensemble.weights", a.weights.map(Some), |c| &mut c.ensemble.weights);
            set(&mut lc, "ensemble.allow_overlap", flag(a.allow_overlap), |c| &mut c.ensemble.allow_overlap);
            init_threads(&lc, cli.threads)?;
            let lambda_given = lambda_flag || lc.sets("/ensemble/hyperparameters/lambda");
            commands::ensemble::fit(&lc, lambda_given)
        }
        Command::Ensemble(EnsembleCommand::Apply(a)) => {
            let mut lc = load(&a.common)?;
            let preds = (!a.predictions.is_empty()).then(|| a.predictions.clone());
            set(&mut lc, "predictions", preds, |c| &mut c.predictions);
            set(&mut lc, "ensemble.weights", a.weights.map(Some), |c| &mut c.ensemble.weights);
            set(&mut lc, "ensemble.kaggle", flag(a.kaggle), |c| &mut c.ensemble.kaggle);
            init_threads(&lc, cli.threads)?;
            commands::ensemble::apply(&lc)
        }
        Command::Report(a) => {
            let mut lc = load(&a.common)?;
            set_inputs(&mut lc, &a.inputs);
            let weights = (!a.weights.is_empty()).then(|| a.weights.clone());
            set(&mut lc, "report.weights", weights, |c| &mut c.report.weights);
            init_threads(&lc, cli.threads)?;
            commands::report::run(&lc)
        }
    }
}

