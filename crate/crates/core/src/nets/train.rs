use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::model::{forward_batch, loss_and_gradients, sample_masks};
use super::{ToyNetConfig, ToyNetParams};
use crate::combine::{AdamConfig, AdamState};
use crate::data::{Container, Dtype};
use crate::data::{LabelSet, PredictionSet, SelectRows};
use crate::error::{Error, Result};
use crate::metrics::{fmt_f64, gap_at_k_scores, DEFAULT_GAP_K};
use crate::rng::{stream, SeededRng};

pub const FEATURES_KIND: &str = "features";

/// Rows processed per forward pass when predicting.
const PREDICT_CHUNK: usize = 2048;

/// Feature rows paired with their labels; row `i` belongs to example `i` of
/// `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: LabelSet,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: LabelSet) -> Result<Self> {
        if features.nrows() != labels.n_examples() {
            return Err(Error::SizeMismatch {
                expected: labels.n_examples(),
                found: features.nrows(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features contain non-finite values".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let labels = self.labels.select_rows(idx)?;
        Ok(Self {
            features: self.features.select(Axis(0), idx),
            labels,
        })
    }

    fn dense_targets(&self, rows: &[usize]) -> Array2<f64> {
        let mut y = Array2::zeros((rows.len(), self.labels.n_classes()));
        for (r, &i) in rows.iter().enumerate() {
            for &c in self.labels.positives(i) {
                y[[r, c as usize]] = 1.0;
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetHyperParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Start the output bias at the logit of each class's training
    /// frequency instead of zero.
    pub output_bias_from_prior: bool,
    /// Evaluate GAP on the training (and held-out) data after every epoch.
    pub log_gap: bool,
    pub gap_k: usize,
}

impl Default for NetHyperParams {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            epochs: 20,
            batch_size: 64,
            output_bias_from_prior: false,
            log_gap: true,
            gap_k: DEFAULT_GAP_K,
        }
    }
}

impl NetHyperParams {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetEpoch {
    pub epoch: usize,
    /// Example-weighted mean of the mini-batch losses.
    pub loss: f64,
    pub train_gap: Option<f64>,
    pub heldout_gap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<NetEpoch>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "train_gap", "heldout_gap"])?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), fmt_f64(e.loss), opt(e.train_gap), opt(e.heldout_gap)])?;
        }
        w.flush().map_err(|e| Error::io("<training log>", e))?;
        Ok(())
    }
}

fn prior_logits(labels: &LabelSet) -> Vec<f64> {
    let n = labels.n_examples().max(1) as f64;
    labels
        .class_counts()
        .iter()
        .map(|&k| {
            let p = (k as f64 / n).clamp(1e-4, 1.0 - 1e-4);
            (p / (1.0 - p)).ln()
        })
        .collect()
}

/// Trains the network with Adam on mini-batches of the mean cross-entropy.
/// Initial weights come from `cfg.seed`; batch order and dropout masks from
/// `seed`.
pub fn fcrn_train(
    cfg: &ToyNetConfig,
    train: &Dataset,
    heldout: Option<&Dataset>,
    hp: &NetHyperParams,
    seed: u64,
) -> Result<(ToyNetParams, TrainLog)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if hp.batch_size == 0 || !(hp.learning_rate >= 0.0) {
        return Err(Error::InvalidArgument("batch size must be positive and learning rate non-negative".into()));
    }
    for d in std::iter::once(train).chain(heldout) {
        if d.features.ncols() != cfg.input_dim || d.labels.n_classes() != cfg.n_classes {
            return Err(Error::Dimension(format!(
                "dataset is {} features x {} classes, network expects {} x {}",
                d.features.ncols(),
                d.labels.n_classes(),
                cfg.input_dim,
                cfg.n_classes
            )));
        }
    }
    let mut params = ToyNetParams::init(cfg)?;
    if hp.output_bias_from_prior {
        params.b_out = prior_logits(&train.labels).into();
    }
    let mut adam: Vec<AdamState> = params.tensors().iter().map(|t| AdamState::new(hp.adam(), t.len())).collect();
    let mut rng = SeededRng::derive(seed, stream::NET_TRAIN, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=hp.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let x = train.features.select(Axis(0), batch);
            let y = train.dense_targets(batch);
            let masks = sample_masks(cfg, batch.len(), &mut rng);
            let (loss, grads) = loss_and_gradients(&params, x.view(), y.view(), masks.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            total += loss * batch.len() as f64;
            for ((p, g), state) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut adam) {
                state.step(p, g)?;
            }
        }
        let gap = |d: &Dataset| -> Result<f64> {
            let scores = predict_scores(&params, d.features.view())?;
            gap_at_k_scores(&scores, cfg.n_classes, &d.labels, hp.gap_k)
        };
        let (train_gap, heldout_gap) = if hp.log_gap {
            (Some(gap(train)?), heldout.map(gap).transpose()?)
        } else {
            (None, None)
        };
        log.epochs.push(NetEpoch {
            epoch,
            loss: total / train.len() as f64,
            train_gap,
            heldout_gap,
        });
    }
    Ok((params, log))
}

fn predict_scores(params: &ToyNetParams, features: ArrayView2<'_, f64>) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(features.nrows() * params.b_out.len());
    let mut start = 0;
    while start < features.nrows() {
        let end = (start + PREDICT_CHUNK).min(features.nrows());
        let probs = forward_batch(params, features.slice(s![start..end, ..]), None)?.probabilities();
        out.extend(probs.iter().map(|&p| p as f32));
        start = end;
    }
    Ok(out)
}

/// Inference-mode scores for every row of `features`.
pub fn predict(
    params: &ToyNetParams,
    features: ArrayView2<'_, f64>,
    example_ids: Vec<String>,
    model_name: &str,
) -> Result<PredictionSet> {
    let scores = predict_scores(params, features)?;
    PredictionSet::new(model_name, example_ids, params.b_out.len(), scores)
}

pub fn save_features(example_ids: &[String], features: ArrayView2<'_, f64>, path: &Path) -> Result<()> {
    if example_ids.len() != features.nrows() {
        return Err(Error::SizeMismatch {
            expected: features.nrows(),
            found: example_ids.len(),
        });
    }
    let mut manifest = Map::new();
    manifest.insert("kind".into(), Value::from(FEATURES_KIND));
    manifest.insert("n_examples".into(), Value::from(features.nrows()));
    manifest.insert("dim".into(), Value::from(features.ncols()));
    let values: Vec<f64> = features.iter().copied().collect();
    Container::from_f64(manifest, example_ids.to_vec(), &values).write(path)
}

pub fn load_features(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let c = Container::read(path)?;
    if c.kind() != Some(FEATURES_KIND) || c.dtype() != Some(Dtype::F64) {
        return Err(Error::format(path, "not an f64 features container"));
    }
    let n = c.manifest_usize("n_examples", path)?;
    let dim = c.manifest_usize("dim", path)?;
    let values = c.f64_values();
    if values.len() != n * dim || c.ids.len() != n {
        return Err(Error::SizeMismatch {
            expected: n * dim,
            found: values.len(),
        });
    }
    let features = Array2::from_shape_vec((n, dim), values).expect("size checked");
    Ok((c.ids, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::tests::small_config;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    /// Two classes decided by the sign of a fixed direction, with a margin.
    fn separable(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mut rows = Vec::with_capacity(n * d);
        let mut pos = Vec::with_capacity(n);
        while pos.len() < n {
            let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let proj: f64 = x.iter().zip(&dir).map(|(a, b)| a * b).sum();
            if proj.abs() < 0.5 {
                continue;
            }
            rows.extend_from_slice(&x);
            pos.push(if proj > 0.0 { vec![0] } else { vec![1] });
        }
        let labels = LabelSet::new(ids(n), 2, pos).unwrap();
        Dataset::new(Array2::from_shape_vec((n, d), rows).unwrap(), labels).unwrap()
    }

    fn net_for(d: usize, seed: u64) -> ToyNetConfig {
        ToyNetConfig {
            input_dim: d,
            hidden_dims: vec![16],
            n_resnet_blocks: 1,
            dropout_rate: 0.0,
            n_classes: 2,
            use_gated_output: true,
            gate_bias: true,
            seed,
        }
    }

    /// Plain logistic regression by full-batch gradient descent, used as an
    /// oracle that the toy set is separable.
    fn logistic_oracle_loss(data: &Dataset) -> f64 {
        let (n, d) = data.features.dim();
        let mut w = vec![0.0; d + 1];
        let ys: Vec<f64> = (0..n).map(|i| if data.labels.is_positive(i, 0) { 1.0 } else { 0.0 }).collect();
        let mut loss = 0.0;
        for _ in 0..3000 {
            let mut g = vec![0.0; d + 1];
            loss = 0.0;
            for i in 0..n {
                let z: f64 = w[d] + (0..d).map(|j| w[j] * data.features[[i, j]]).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - ys[i] * z;
                for j in 0..d {
                    g[j] += (p - ys[i]) * data.features[[i, j]];
                }
                g[d] += p - ys[i];
            }
            loss /= n as f64;
            for j in 0..=d {
                w[j] -= 1.0 * g[j] / n as f64;
            }
        }
        loss
    }

    #[test]
    fn separable_set_is_learned() {
        let data = separable(1, 200, 8);
        assert!(logistic_oracle_loss(&data) < 0.05);
        let hp = NetHyperParams { learning_rate: 1e-2, epochs: 500, batch_size: 50, log_gap: false, ..NetHyperParams::default() };
        let (_, log) = fcrn_train(&net_for(8, 2), &data, None, &hp, 3).unwrap();
        let last = log.epochs.last().unwrap().loss;
        assert!(last < 0.1, "final loss {last}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = separable(4, 40, 8);
        let cfg = net_for(8, 5);
        let hp = NetHyperParams { learning_rate: 0.0, epochs: 5, batch_size: 8, ..NetHyperParams::default() };
        let (p, log) = fcrn_train(&cfg, &data, None, &hp, 6).unwrap();
        assert_eq!(p, ToyNetParams::init(&cfg).unwrap());
        assert_eq!(log.epochs.len(), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(7, 60, 8);
        let mut cfg = net_for(8, 8);
        cfg.dropout_rate = 0.3;
        let hp = NetHyperParams { epochs: 4, batch_size: 16, ..NetHyperParams::default() };
        let (a, la) = fcrn_train(&cfg, &data, Some(&data), &hp, 9).unwrap();
        let (b, lb) = fcrn_train(&cfg, &data, Some(&data), &hp, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = fcrn_train(&cfg, &data, None, &hp, 10).unwrap();
        assert_ne!(a, c);
        let mut csv = Vec::new();
        la.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,loss,train_gap,heldout_gap\n1,"));
    }

    #[test]
    fn prior_bias_initialisation() {
        let data = separable(11, 100, 8);
        let logits = prior_logits(&data.labels);
        let share = data.labels.class_counts()[0] as f64 / 100.0;
        assert!((logits[0] - (share / (1.0 - share)).ln()).abs() < 1e-12);
    }

    #[test]
    fn predictions_and_features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(12);
        let p = ToyNetParams::init(&cfg).unwrap();
        let mut rng = SeededRng::new(13);
        let x = Array2::from_shape_simple_fn((5, 6), || rng.normal());
        let preds = predict(&p, x.view(), ids(5), "net").unwrap();
        assert_eq!((preds.n_examples(), preds.n_classes()), (5, 3));
        let path = dir.path().join("f.bin");
        save_features(&ids(5), x.view(), &path).unwrap();
        let (got_ids, got) = load_features(&path).unwrap();
        assert_eq!(got_ids, ids(5));
        assert_eq!(got, x);
    }
}
