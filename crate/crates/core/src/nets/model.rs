use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::layers::sigmoid;
use super::{BlockParams, GateParams, ToyNetConfig, ToyNetParams};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks are sampled from the generator.
    Train,
    /// Plain forward pass; the generator is not touched.
    Infer,
}

/// Intermediate activations of a batched forward pass, rows are examples.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pre_in: Array2<f64>,
    /// Residual stream entering each block, then the final stream.
    stream: Vec<Array2<f64>>,
    pre_block: Vec<Array2<f64>>,
    masks: Option<Vec<Array2<f64>>>,
    gate: Option<Array2<f64>>,
    gated: Array2<f64>,
    pub logits: Array2<f64>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }

    /// Smallest absolute ReLU pre-activation; finite differences are only
    /// reliable when this stays well above the perturbation size.
    pub fn relu_margin(&self) -> f64 {
        self.pre_in
            .iter()
            .chain(self.pre_block.iter().flatten())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Inverted-dropout masks for every block: kept units carry `1 / (1 - p)`.
/// Returns `None` when the dropout rate is zero.
pub fn sample_masks(cfg: &ToyNetConfig, n: usize, rng: &mut SeededRng) -> Option<Vec<Array2<f64>>> {
    let p = cfg.dropout_rate;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..cfg.n_resnet_blocks)
            .map(|_| Array2::from_shape_simple_fn((n, cfg.block_width()), || if rng.bernoulli(1.0 - p) { keep } else { 0.0 }))
            .collect(),
    )
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    if let Some(b) = b {
        out += b;
    }
    out
}

/// Forward pass over a batch `x` (`n x input_dim`).
pub fn forward_batch(
    params: &ToyNetParams,
    x: ArrayView2<'_, f64>,
    masks: Option<&[Array2<f64>]>,
) -> Result<ForwardCache> {
    let n = x.nrows();
    if x.ncols() != params.w_in.ncols() {
        return Err(Error::Dimension(format!(
            "input has {} features, network expects {}",
            x.ncols(),
            params.w_in.ncols()
        )));
    }
    if let Some(m) = masks {
        let ok = m.len() == params.blocks.len()
            && m.iter().zip(&params.blocks).all(|(m, b)| m.dim() == (n, b.c1.nrows()));
        if !ok {
            return Err(Error::Dimension("dropout masks do not match the batch and blocks".into()));
        }
    }
    let pre_in = affine(&x.to_owned(), &params.w_in, Some(&params.b_in));
    let mut h = pre_in.mapv(|v| v.max(0.0));
    let mut stream = Vec::with_capacity(params.blocks.len() + 1);
    let mut pre_block = Vec::with_capacity(params.blocks.len());
    for (i, BlockParams { c1, c2 }) in params.blocks.iter().enumerate() {
        let u = h.dot(&c1.t());
        let mut r = u.mapv(|v| v.max(0.0));
        if let Some(m) = masks {
            r *= &m[i];
        }
        let next = r.dot(&c2.t()) + &h;
        stream.push(h);
        pre_block.push(u);
        h = next;
    }
    let (gate, gated) = match &params.gate {
        Some(GateParams { w, b }) => {
            let g = affine(&h, w, b.as_ref()).mapv(sigmoid);
            let gated = &h * &g;
            (Some(g), gated)
        }
        None => (None, h.clone()),
    };
    let logits = affine(&gated, &params.w_out, Some(&params.b_out));
    stream.push(h);
    Ok(ForwardCache {
        pre_in,
        stream,
        pre_block,
        masks: masks.map(<[Array2<f64>]>::to_vec),
        gate,
        gated,
        logits,
    })
}

/// Per-class probabilities for a single feature vector.
pub fn fcrn_forward(
    cfg: &ToyNetConfig,
    params: &ToyNetParams,
    phi: &[f64],
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if phi.len() != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "feature vector has {} entries, network expects {}",
            phi.len(),
            cfg.input_dim
        )));
    }
    let x = ArrayView2::from_shape((1, phi.len()), phi).expect("contiguous slice");
    let masks = match mode {
        Mode::Train => sample_masks(cfg, 1, rng),
        Mode::Infer => None,
    };
    let cache = forward_batch(params, x, masks.as_deref())?;
    Ok(cache.probabilities().into_raw_vec_and_offset().0)
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn bce_loss(logits: &Array2<f64>, y: ArrayView2<'_, f64>) -> f64 {
    let total: f64 = Zip::from(logits).and(&y).fold(0.0, |acc, &z, &t| acc + softplus(z) - t * z);
    total / logits.len() as f64
}

/// Products involving transposed views may come back column-major; parameter
/// tensors are always kept in row-major order.
fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn relu_backward(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Mean binary cross-entropy of the sigmoid outputs over all `n x C`
/// entries, and its exact gradient with respect to every parameter.
pub fn loss_and_gradients(
    params: &ToyNetParams,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    masks: Option<&[Array2<f64>]>,
) -> Result<(f64, ToyNetParams)> {
    let cache = forward_batch(params, x, masks)?;
    if y.dim() != cache.logits.dim() {
        return Err(Error::Dimension(format!(
            "targets {:?} do not match outputs {:?}",
            y.dim(),
            cache.logits.dim()
        )));
    }
    let loss = bce_loss(&cache.logits, y);
    Ok((loss, backward(params, x, y, &cache)))
}

fn backward(params: &ToyNetParams, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, cache: &ForwardCache) -> ToyNetParams {
    let mut grads = params.zeros_like();
    let scale = 1.0 / cache.logits.len() as f64;
    let mut dz = cache.logits.mapv(sigmoid);
    Zip::from(&mut dz).and(&y).for_each(|d, &t| *d = (*d - t) * scale);

    grads.w_out = row_major(dz.t().dot(&cache.gated));
    grads.b_out = dz.sum_axis(Axis(0));
    let d_gated = dz.dot(&params.w_out);

    let h = cache.stream.last().expect("final stream");
    let mut dh = match (&params.gate, &cache.gate, &mut grads.gate) {
        (Some(gp), Some(g), Some(gg)) => {
            let mut ds = &d_gated * h;
            Zip::from(&mut ds).and(g).for_each(|d, &s| *d *= s * (1.0 - s));
            gg.w = row_major(ds.t().dot(h));
            if let Some(b) = &mut gg.b {
                *b = ds.sum_axis(Axis(0));
            }
            &d_gated * g + ds.dot(&gp.w)
        }
        _ => d_gated,
    };

    for (i, block) in params.blocks.iter().enumerate().rev() {
        let h_in = &cache.stream[i];
        let u = &cache.pre_block[i];
        let mut r = u.mapv(|v| v.max(0.0));
        if let Some(m) = &cache.masks {
            r *= &m[i];
        }
        grads.blocks[i].c2 = row_major(dh.t().dot(&r));
        let mut du = dh.dot(&block.c2);
        if let Some(m) = &cache.masks {
            du *= &m[i];
        }
        relu_backward(&mut du, u);
        grads.blocks[i].c1 = row_major(du.t().dot(h_in));
        dh += &du.dot(&block.c1);
    }

    relu_backward(&mut dh, &cache.pre_in);
    grads.w_in = row_major(dh.t().dot(&x));
    grads.b_in = dh.sum_axis(Axis(0));
    grads
}

#[cfg(test)]
/// Probabilities for a single row.
pub(crate) fn row_probabilities(params: &ToyNetParams, x: ndarray::ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let x2 = x.insert_axis(Axis(0));
    Ok(forward_batch(params, x2, None)?.probabilities().row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::layers::{gated_layer_forward, resnet_block_forward};
    use crate::nets::tests::small_config;

    fn random_input(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = SeededRng::new(seed);
        Array2::from_shape_simple_fn((n, d), || rng.normal())
    }

    #[test]
    fn zero_output_layer_gives_one_half() {
        let cfg = small_config(1);
        let mut p = ToyNetParams::init(&cfg).unwrap();
        p.w_out.fill(0.0);
        let x = random_input(2, 4, 6);
        let probs = forward_batch(&p, x.view(), None).unwrap().probabilities();
        assert!(probs.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn no_blocks_matches_manual_chain() {
        let mut cfg = small_config(3);
        cfg.n_resnet_blocks = 0;
        let p = ToyNetParams::init(&cfg).unwrap();
        let x = random_input(4, 1, 6);
        let got = row_probabilities(&p, x.row(0)).unwrap();
        let h = (p.w_in.dot(&x.row(0)) + &p.b_in).mapv(|v| v.max(0.0));
        let g = p.gate.as_ref().unwrap();
        let gated = gated_layer_forward(h.view(), g.w.view(), g.b.as_ref().map(|b| b.view())).unwrap();
        let want = (p.w_out.dot(&gated) + &p.b_out).mapv(sigmoid);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn batched_pass_matches_layer_functions() {
        let cfg = small_config(5);
        let p = ToyNetParams::init(&cfg).unwrap();
        let x = random_input(6, 3, 6);
        let probs = forward_batch(&p, x.view(), None).unwrap().probabilities();
        for i in 0..3 {
            let mut h = (p.w_in.dot(&x.row(i)) + &p.b_in).mapv(|v| v.max(0.0));
            for b in &p.blocks {
                h = resnet_block_forward(h.view(), b.c1.view(), b.c2.view(), None).unwrap();
            }
            let g = p.gate.as_ref().unwrap();
            let gated = gated_layer_forward(h.view(), g.w.view(), g.b.as_ref().map(|b| b.view())).unwrap();
            let want = (p.w_out.dot(&gated) + &p.b_out).mapv(sigmoid);
            for j in 0..3 {
                assert!((probs[[i, j]] - want[j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn infer_mode_ignores_rng() {
        let mut cfg = small_config(7);
        cfg.dropout_rate = 0.4;
        let p = ToyNetParams::init(&cfg).unwrap();
        let phi = vec![0.1, -0.3, 0.5, 0.2, 0.0, 0.9];
        let a = fcrn_forward(&cfg, &p, &phi, Mode::Infer, &mut SeededRng::new(1)).unwrap();
        let b = fcrn_forward(&cfg, &p, &phi, Mode::Infer, &mut SeededRng::new(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(fcrn_forward(&cfg, &p, &phi[..5], Mode::Infer, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn masks_are_inverted_dropout() {
        let mut cfg = small_config(8);
        cfg.dropout_rate = 0.25;
        let masks = sample_masks(&cfg, 2000, &mut SeededRng::new(3)).unwrap();
        assert_eq!(masks.len(), 2);
        let m = &masks[0];
        assert!(m.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let mean = m.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        cfg.dropout_rate = 0.0;
        assert!(sample_masks(&cfg, 3, &mut SeededRng::new(3)).is_none());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }
}
