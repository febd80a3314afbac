//! A small gated fully-connected residual network over aggregated
//! frame features, with exact backpropagation.

mod gradcheck;
mod layers;
mod model;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Container, Dtype};
use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};

pub use gradcheck::{grad_check, GradCheckReport, ABS_REGIME_THRESHOLD, FD_STEP};
pub use layers::{aggregate_mean_std, gated_layer_forward, resnet_block_forward, sigmoid, FeatureVector};
pub use model::{fcrn_forward, forward_batch, loss_and_gradients, sample_masks, ForwardCache, Mode};
pub use train::{
    fcrn_train, load_features, predict, save_features, Dataset, NetEpoch, NetHyperParams, TrainLog, FEATURES_KIND,
};

pub const TOYNET_PARAMS_KIND: &str = "toynet_params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub input_dim: usize,
    /// Width of the input layer, optionally followed by the inner width of
    /// the residual blocks (defaults to the input-layer width).
    pub hidden_dims: Vec<usize>,
    pub n_resnet_blocks: usize,
    /// Dropout probability inside the residual blocks.
    pub dropout_rate: f64,
    pub n_classes: usize,
    pub use_gated_output: bool,
    #[serde(default = "default_true")]
    pub gate_bias: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl ToyNetConfig {
    pub fn width(&self) -> usize {
        self.hidden_dims[0]
    }

    pub fn block_width(&self) -> usize {
        self.hidden_dims.get(1).copied().unwrap_or(self.hidden_dims[0])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim == 0 || self.n_classes == 0 {
            return bad("input and class dimensions must be positive".into());
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.len() > 2 || self.hidden_dims.contains(&0) {
            return bad(format!("hidden_dims must hold one or two positive widths, got {:?}", self.hidden_dims));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// Weights of one residual block: `y = c2 (mask * relu(c1 x)) + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub c1: Array2<f64>,
    pub c2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

/// All trainable tensors. Matrices map column inputs to row outputs
/// (`out = W x`).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetParams {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub gate: Option<GateParams>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

fn uniform_matrix(rows: usize, cols: usize, limit: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform_in(-limit, limit))
}

impl ToyNetParams {
    /// Fan-in scaled uniform initialisation: layers feeding a ReLU draw from
    /// `±sqrt(6 / fan_in)`, the others from `±sqrt(3 / fan_in)`. Biases start
    /// at zero.
    pub fn init(cfg: &ToyNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derive(cfg.seed, stream::NET_INIT, 0);
        let (h, b, c) = (cfg.width(), cfg.block_width(), cfg.n_classes);
        let relu_fed = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let linear = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let w_in = uniform_matrix(h, cfg.input_dim, relu_fed(cfg.input_dim), &mut rng);
        let blocks = (0..cfg.n_resnet_blocks)
            .map(|_| BlockParams {
                c1: uniform_matrix(b, h, relu_fed(h), &mut rng),
                c2: uniform_matrix(h, b, linear(b), &mut rng),
            })
            .collect();
        let gate = cfg.use_gated_output.then(|| GateParams {
            w: uniform_matrix(h, h, linear(h), &mut rng),
            b: cfg.gate_bias.then(|| Array1::zeros(h)),
        });
        let w_out = uniform_matrix(c, h, linear(h), &mut rng);
        Ok(Self {
            w_in,
            b_in: Array1::zeros(h),
            blocks,
            gate,
            w_out,
            b_out: Array1::zeros(c),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            w_in: Array2::zeros(self.w_in.raw_dim()),
            b_in: Array1::zeros(self.b_in.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    c1: Array2::zeros(b.c1.raw_dim()),
                    c2: Array2::zeros(b.c2.raw_dim()),
                })
                .collect(),
            gate: self.gate.as_ref().map(|g| GateParams {
                w: Array2::zeros(g.w.raw_dim()),
                b: g.b.as_ref().map(|b| Array1::zeros(b.raw_dim())),
            }),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.raw_dim()),
        }
    }

    /// Tensor names in a fixed order shared by [`Self::tensors`] and
    /// [`Self::tensors_mut`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["w_in".to_owned(), "b_in".to_owned()];
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.c1"));
            names.push(format!("block{i}.c2"));
        }
        if let Some(g) = &self.gate {
            names.push("gate.w".into());
            if g.b.is_some() {
                names.push("gate.b".into());
            }
        }
        names.push("w_out".into());
        names.push("b_out".into());
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.w_in.as_slice().expect("standard layout"),
            self.b_in.as_slice().expect("standard layout"),
        ];
        for b in &self.blocks {
            out.push(b.c1.as_slice().expect("standard layout"));
            out.push(b.c2.as_slice().expect("standard layout"));
        }
        if let Some(g) = &self.gate {
            out.push(g.w.as_slice().expect("standard layout"));
            if let Some(b) = &g.b {
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        out.push(self.w_out.as_slice().expect("standard layout"));
        out.push(self.b_out.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.w_in.as_slice_mut().expect("standard layout"),
            self.b_in.as_slice_mut().expect("standard layout"),
        ];
        for b in &mut self.blocks {
            out.push(b.c1.as_slice_mut().expect("standard layout"));
            out.push(b.c2.as_slice_mut().expect("standard layout"));
        }
        if let Some(g) = &mut self.gate {
            out.push(g.w.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut g.b {
                out.push(b.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.w_out.as_slice_mut().expect("standard layout"));
        out.push(self.b_out.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks that every tensor has the shape implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ToyNetConfig) -> Result<()> {
        let reference = ToyNetParams::init(cfg)?;
        let ok = self.blocks.len() == reference.blocks.len()
            && self.gate.is_some() == reference.gate.is_some()
            && self.tensor_names() == reference.tensor_names()
            && self.tensors().iter().zip(reference.tensors()).all(|(a, b)| a.len() == b.len())
            && self.w_in.dim() == reference.w_in.dim()
            && self.w_out.dim() == reference.w_out.dim()
            && self
                .blocks
                .iter()
                .zip(&reference.blocks)
                .all(|(a, b)| a.c1.dim() == b.c1.dim() && a.c2.dim() == b.c2.dim());
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("network parameters do not match the configuration".into()))
        }
    }

    pub fn save(&self, cfg: &ToyNetConfig, path: &Path) -> Result<()> {
        let mut manifest = Map::new();
        manifest.insert("kind".into(), Value::from(TOYNET_PARAMS_KIND));
        manifest.insert("config".into(), serde_json::to_value(cfg)?);
        let sizes: Vec<usize> = self.tensors().iter().map(|t| t.len()).collect();
        manifest.insert("tensor_sizes".into(), serde_json::to_value(sizes)?);
        let values: Vec<f64> = self.tensors().concat();
        Container::from_f64(manifest, self.tensor_names(), &values).write(path)
    }

    pub fn load(path: &Path) -> Result<(ToyNetConfig, Self)> {
        let c = Container::read(path)?;
        if c.kind() != Some(TOYNET_PARAMS_KIND) {
            return Err(Error::format(path, "container kind is not \"toynet_params\""));
        }
        if c.dtype() != Some(Dtype::F64) {
            return Err(Error::format(path, "network parameters must be f64"));
        }
        let cfg: ToyNetConfig = serde_json::from_value(
            c.manifest
                .get("config")
                .cloned()
                .ok_or_else(|| Error::format(path, "manifest field \"config\" missing"))?,
        )?;
        let mut params = ToyNetParams::init(&cfg)?;
        if c.ids != params.tensor_names() {
            return Err(Error::format(path, "tensor names do not match the configuration"));
        }
        let values = c.f64_values();
        if values.len() != params.n_params() {
            return Err(Error::SizeMismatch {
                expected: params.n_params(),
                found: values.len(),
            });
        }
        let mut offset = 0;
        for t in params.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        if !params.is_finite() {
            return Err(Error::format(path, "network parameters contain non-finite values"));
        }
        Ok((cfg, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(seed: u64) -> ToyNetConfig {
        ToyNetConfig {
            input_dim: 6,
            hidden_dims: vec![5, 4],
            n_resnet_blocks: 2,
            dropout_rate: 0.0,
            n_classes: 3,
            use_gated_output: true,
            gate_bias: true,
            seed,
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = small_config(1);
        let p = ToyNetParams::init(&cfg).unwrap();
        assert_eq!(p.w_in.dim(), (5, 6));
        assert_eq!(p.blocks[0].c1.dim(), (4, 5));
        assert_eq!(p.blocks[0].c2.dim(), (5, 4));
        assert_eq!(p.gate.as_ref().unwrap().w.dim(), (5, 5));
        assert_eq!(p.w_out.dim(), (3, 5));
        assert_eq!(p, ToyNetParams::init(&cfg).unwrap());
        assert_ne!(p, ToyNetParams::init(&small_config(2)).unwrap());
        let lim = (6.0f64 / 6.0).sqrt();
        assert!(p.w_in.iter().all(|v| v.abs() <= lim));
        assert_eq!(p.tensor_names().len(), p.tensors().len());
        assert_eq!(p.n_params(), 30 + 5 + 2 * (20 + 20) + 25 + 5 + 15 + 3);
    }

    #[test]
    fn gate_bias_flag_removes_tensor() {
        let mut cfg = small_config(1);
        cfg.gate_bias = false;
        let p = ToyNetParams::init(&cfg).unwrap();
        assert!(p.gate.as_ref().unwrap().b.is_none());
        assert!(!p.tensor_names().contains(&"gate.b".to_owned()));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_config(1);
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(1);
        cfg.hidden_dims = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let cfg = small_config(9);
        let p = ToyNetParams::init(&cfg).unwrap();
        p.save(&cfg, &path).unwrap();
        let (cfg2, p2) = ToyNetParams::load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);
    }
}
