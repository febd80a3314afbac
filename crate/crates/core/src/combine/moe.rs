//! Gradient-trained linear combiners: one weight per model, one weight per
//! (model, class), and a shared weight plus a penalised per-class residual.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::weights::{combine_into, combine_rows, EnsembleWeights, WeightKind, WeightsMetadata};
use crate::data::{ensure_all_aligned, ensure_pred_labels, LabelSet, PredictionSet, SelectRows, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{fmt_f64, gap_at_k_scores};
use crate::rng::{stream, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeKind {
    PerModel,
    PerModelClass,
    DualStream,
}

impl MoeKind {
    pub fn weight_kind(self) -> WeightKind {
        match self {
            MoeKind::PerModel => WeightKind::PerModel,
            MoeKind::PerModelClass => WeightKind::PerModelClass,
            MoeKind::DualStream => WeightKind::DualStream,
        }
    }
}

impl fmt::Display for MoeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.weight_kind().fmt(f)
    }
}

impl FromStr for MoeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<WeightKind>()? {
            WeightKind::PerModel => Ok(MoeKind::PerModel),
            WeightKind::PerModelClass => Ok(MoeKind::PerModelClass),
            WeightKind::DualStream => Ok(MoeKind::DualStream),
            WeightKind::Average => Err(Error::InvalidArgument("average weights are not trained".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeHyperParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    /// Examples per mini-batch.
    pub batch_size: usize,
    /// Penalty on the squared norm of the dual-stream residual.
    pub lambda: f64,
    /// Cut-off used for the logged GAP values.
    pub gap_k: usize,
    /// Combined scores are clamped to `[clamp_eps, 1 - clamp_eps]` inside the loss.
    pub clamp_eps: f64,
}

impl Default for MoeHyperParams {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            epochs: 50,
            batch_size: 1024,
            lambda: 1e-3,
            gap_k: crate::metrics::DEFAULT_GAP_K,
            clamp_eps: 1e-6,
        }
    }
}

impl MoeHyperParams {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return bad("clamp epsilon must lie in (0, 0.5)");
        }
        if self.gap_k == 0 {
            return bad("gap k must be positive");
        }
        Ok(())
    }
}

/// State of the combiner at the end of one epoch (epoch 0 is the initial state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the whole fit part, penalty included.
    pub train_loss: f64,
    pub train_gap: f64,
    pub heldout_gap: f64,
    /// Per-model weight, or per-model mean coefficient for matrix kinds.
    pub weights: Vec<f64>,
    /// Frobenius norm of the dual-stream residual.
    pub residual_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: MoeKind,
    pub model_names: Vec<String>,
    pub hyperparameters: MoeHyperParams,
    pub seed: u64,
    pub split_seed: u64,
    pub split_fraction: f64,
    pub n_fit: usize,
    pub n_heldout: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_weights: EnsembleWeights,
}

impl FitReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("report always holds the initial epoch")
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// One row per epoch: `epoch,train_loss,train_gap,heldout_gap,w_<model>...`.
    pub fn write_epoch_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_owned(), "train_loss".into(), "train_gap".into(), "heldout_gap".into()];
        header.extend(self.model_names.iter().map(|m| format!("w_{m}")));
        if self.kind == MoeKind::DualStream {
            header.push("residual_norm".into());
        }
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), fmt_f64(e.train_loss), fmt_f64(e.train_gap), fmt_f64(e.heldout_gap)];
            row.extend(e.weights.iter().map(|&v| fmt_f64(v)));
            if let Some(r) = e.residual_norm {
                row.push(fmt_f64(r));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<epoch csv>", e))?;
        Ok(())
    }
}

/// Flat parameter vector and its mapping to coefficients.
struct Params {
    kind: MoeKind,
    d: usize,
    c: usize,
    values: Vec<f64>,
}

impl Params {
    fn init(kind: MoeKind, d: usize, c: usize) -> Self {
        let uniform = 1.0 / d as f64;
        let values = match kind {
            MoeKind::PerModel => vec![uniform; d],
            MoeKind::PerModelClass => vec![uniform; d * c],
            MoeKind::DualStream => {
                let mut v = vec![uniform; d];
                v.resize(d + d * c, 0.0);
                v
            }
        };
        Self { kind, d, c, values }
    }

    fn residual(&self) -> &[f64] {
        match self.kind {
            MoeKind::DualStream => &self.values[self.d..],
            _ => &[],
        }
    }

    fn coefficients(&self) -> Vec<Vec<f64>> {
        let (d, c) = (self.d, self.c);
        (0..d)
            .map(|i| match self.kind {
                MoeKind::PerModel => vec![self.values[i]; c],
                MoeKind::PerModelClass => self.values[i * c..(i + 1) * c].to_vec(),
                MoeKind::DualStream => {
                    let r = &self.values[d + i * c..d + (i + 1) * c];
                    r.iter().map(|v| self.values[i] + v).collect()
                }
            })
            .collect()
    }

    fn weights(&self, names: &[String]) -> EnsembleWeights {
        let (d, c) = (self.d, self.c);
        let rows = |off: usize| (0..d).map(|i| self.values[off + i * c..off + (i + 1) * c].to_vec()).collect();
        match self.kind {
            MoeKind::PerModel => EnsembleWeights::per_model(names.to_vec(), self.values.clone()),
            MoeKind::PerModelClass => EnsembleWeights::per_model_class(names.to_vec(), rows(0)),
            MoeKind::DualStream => EnsembleWeights::dual_stream(names.to_vec(), self.values[..d].to_vec(), rows(d)),
        }
    }

    /// Folds the D x C gradient with respect to the coefficients into the
    /// parameter gradient.
    fn fold_gradient(&self, coef_grad: &[f64], lambda: f64, out: &mut [f64]) {
        let (d, c) = (self.d, self.c);
        match self.kind {
            MoeKind::PerModel => {
                for i in 0..d {
                    out[i] = coef_grad[i * c..(i + 1) * c].iter().sum();
                }
            }
            MoeKind::PerModelClass => out.copy_from_slice(coef_grad),
            MoeKind::DualStream => {
                for i in 0..d {
                    out[i] = coef_grad[i * c..(i + 1) * c].iter().sum();
                }
                for (j, g) in coef_grad.iter().enumerate() {
                    out[d + j] = g + 2.0 * lambda * self.values[d + j];
                }
            }
        }
    }
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Binary cross-entropy of a clamped combined score and its derivative with
/// respect to the unclamped score (zero where the clamp is active).
#[inline]
fn bce(z: f64, positive: bool, eps: f64) -> (f64, f64) {
    let zc = z.clamp(eps, 1.0 - eps);
    let inside = z > eps && z < 1.0 - eps;
    if positive {
        (-zc.ln(), if inside { -1.0 / zc } else { 0.0 })
    } else {
        (-(1.0 - zc).ln(), if inside { 1.0 / (1.0 - zc) } else { 0.0 })
    }
}

/// Mean cross-entropy over `rows` (all rows when `None`) plus, for
/// dual-stream weights, `lambda` times the squared residual norm.
pub fn moe_loss(
    preds: &[PredictionSet],
    y: &LabelSet,
    rows: Option<&[usize]>,
    w: &EnsembleWeights,
    lambda: f64,
    clamp_eps: f64,
) -> Result<f64> {
    ensure_all_aligned(preds)?;
    ensure_pred_labels(&preds[0], y)?;
    let c = y.n_classes();
    w.validate(Some(c))?;
    let refs: Vec<&PredictionSet> = preds.iter().collect();
    let (loss, _) = loss_and_grad(&refs, y, rows, &w.coefficients(c), clamp_eps, None);
    let penalty = match (w.kind, &w.residual) {
        (WeightKind::DualStream, Some(r)) => lambda * r.iter().map(|row| squared_norm(row)).sum::<f64>(),
        _ => 0.0,
    };
    Ok(loss + penalty)
}

/// Mean cross-entropy over the given rows; when `grad` is supplied it
/// receives the D x C gradient with respect to the coefficients.
fn loss_and_grad(
    preds: &[&PredictionSet],
    y: &LabelSet,
    rows: Option<&[usize]>,
    coef: &[Vec<f64>],
    eps: f64,
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let c = y.n_classes();
    let n = rows.map_or(y.n_examples(), <[usize]>::len);
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    if n == 0 {
        return (0.0, 0);
    }
    let scale = 1.0 / (n * c) as f64;
    let mut z = vec![0.0; c];
    let mut dz = vec![0.0; c];
    let mut total = 0.0;
    for r in 0..n {
        let row = rows.map_or(r, |idx| idx[r]);
        combine_into(preds, coef, row, &mut z);
        let pos = y.positives(row);
        let mut next_pos = pos.iter().peekable();
        for j in 0..c {
            let positive = next_pos.next_if(|&&p| p as usize == j).is_some();
            let (l, d) = bce(z[j], positive, eps);
            total += l;
            dz[j] = d * scale;
        }
        if let Some(g) = grad.as_deref_mut() {
            for (i, p) in preds.iter().enumerate() {
                let gi = &mut g[i * c..(i + 1) * c];
                for ((gv, &s), &d) in gi.iter_mut().zip(p.row(row)).zip(&dz) {
                    *gv += d * f64::from(s);
                }
            }
        }
    }
    (total * scale, n)
}

fn check_split(split: &SplitSpec, n: usize) -> Result<()> {
    if split.part_a.is_empty() || split.part_b.is_empty() {
        return Err(Error::InvalidArgument("both split parts must be non-empty".into()));
    }
    for part in [&split.part_a, &split.part_b] {
        if let Some(&bad) = part.iter().find(|&&i| i >= n) {
            return Err(Error::RowOutOfRange { index: bad, len: n });
        }
    }
    Ok(())
}

struct Evaluation<'a> {
    preds: Vec<&'a PredictionSet>,
    y: &'a LabelSet,
    part_a: &'a [usize],
    part_b: &'a [usize],
    y_a: LabelSet,
    y_b: LabelSet,
    lambda: f64,
    eps: f64,
    k: usize,
}

impl Evaluation<'_> {
    fn record(&self, epoch: usize, params: &Params, names: &[String]) -> Result<EpochRecord> {
        let coef = params.coefficients();
        let (loss, _) = loss_and_grad(&self.preds, self.y, Some(self.part_a), &coef, self.eps, None);
        let penalty = self.lambda * squared_norm(params.residual());
        let train_loss = loss + penalty;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let c = self.y.n_classes();
        let train = combine_rows(&self.preds, &coef, Some(self.part_a));
        let heldout = combine_rows(&self.preds, &coef, Some(self.part_b));
        Ok(EpochRecord {
            epoch,
            train_loss,
            train_gap: gap_at_k_scores(&train, c, &self.y_a, self.k)?,
            heldout_gap: gap_at_k_scores(&heldout, c, &self.y_b, self.k)?,
            weights: params.weights(names).per_model_means(),
            residual_norm: (params.kind == MoeKind::DualStream).then(|| squared_norm(params.residual()).sqrt()),
        })
    }
}

/// Trains a combiner on `split.part_a` with Adam and mini-batches of
/// `hp.batch_size` examples, logging GAP on both parts after every epoch.
///
/// The per-model weights start at `1/D`, the per-(model, class) matrix at
/// `1/D` everywhere, and the dual-stream residual at zero. Mini-batch order
/// depends only on `seed`.
pub fn moe_fit(
    preds: &[PredictionSet],
    y: &LabelSet,
    kind: MoeKind,
    hp: &MoeHyperParams,
    split: &SplitSpec,
    seed: u64,
) -> Result<FitReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no prediction sets to combine".into()));
    }
    ensure_all_aligned(preds)?;
    ensure_pred_labels(&preds[0], y)?;
    hp.validate()?;
    check_split(split, y.n_examples())?;
    let names: Vec<String> = preds.iter().map(|p| p.model_name().to_owned()).collect();
    let (d, c) = (preds.len(), y.n_classes());

    let eval = Evaluation {
        preds: preds.iter().collect(),
        y,
        part_a: &split.part_a,
        part_b: &split.part_b,
        y_a: y.select_rows(&split.part_a)?,
        y_b: y.select_rows(&split.part_b)?,
        lambda: if kind == MoeKind::DualStream { hp.lambda } else { 0.0 },
        eps: hp.clamp_eps,
        k: hp.gap_k,
    };

    let mut params = Params::init(kind, d, c);
    let mut adam = AdamState::new(hp.adam(), params.values.len());
    let mut coef_grad = vec![0.0; d * c];
    let mut grad = vec![0.0; params.values.len()];
    let mut order = split.part_a.clone();
    let mut batch_rng = SeededRng::derive(seed, stream::MOE_BATCHES, 0);

    let mut epochs = Vec::with_capacity(hp.epochs + 1);
    epochs.push(eval.record(0, &params, &names)?);
    for epoch in 1..=hp.epochs {
        batch_rng.shuffle(&mut order);
        for batch in order.chunks(hp.batch_size) {
            let coef = params.coefficients();
            let (loss, _) = loss_and_grad(&eval.preds, y, Some(batch), &coef, hp.clamp_eps, Some(&mut coef_grad));
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            params.fold_gradient(&coef_grad, eval.lambda, &mut grad);
            adam.step(&mut params.values, &grad)?;
        }
        epochs.push(eval.record(epoch, &params, &names)?);
    }

    let final_weights = params.weights(&names).with_metadata(WeightsMetadata {
        seed: Some(seed),
        hyperparameters: serde_json::to_value(hp)?,
    });
    Ok(FitReport {
        kind,
        model_names: names,
        hyperparameters: hp.clone(),
        seed,
        split_seed: split.seed,
        split_fraction: split.fraction,
        n_fit: split.part_a.len(),
        n_heldout: split.part_b.len(),
        epochs,
        final_weights,
    })
}
