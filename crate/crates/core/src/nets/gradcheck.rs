use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use super::model::{forward_batch, loss_and_gradients};
use super::{ToyNetConfig, ToyNetParams};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this in magnitude are compared by absolute error.
pub const ABS_REGIME_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// gradients at or above [`ABS_REGIME_THRESHOLD`].
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over the smaller gradients.
    pub max_abs_error: f64,
    pub n_relative: usize,
    pub n_absolute: usize,
    /// Name and index of the parameter with the largest relative error.
    pub worst: Option<(String, usize)>,
    /// Smallest absolute ReLU pre-activation in the batch.
    pub relu_margin: f64,
}

/// Compares the backpropagated gradient of the mean cross-entropy on
/// `(x, y)` with central finite differences for every parameter.
///
/// With dropout enabled the masks must be supplied so both evaluations see
/// the same network.
pub fn grad_check(
    cfg: &ToyNetConfig,
    params: &ToyNetParams,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    masks: Option<&[Array2<f64>]>,
) -> Result<GradCheckReport> {
    if cfg.dropout_rate > 0.0 && masks.is_none() {
        return Err(Error::InvalidArgument(
            "gradient check with dropout needs frozen masks".into(),
        ));
    }
    params.check_shapes(cfg)?;
    let (_, analytic) = loss_and_gradients(params, x, y, masks)?;
    let relu_margin = forward_batch(params, x, masks)?.relu_margin();
    let names = params.tensor_names();
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        n_relative: 0,
        n_absolute: 0,
        worst: None,
        relu_margin,
    };
    let eval = |probe: &ToyNetParams| loss_and_gradients(probe, x, y, masks).map(|(l, _)| l);
    for (t, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.tensors()[t][j];
            probe.tensors_mut()[t][j] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe.tensors_mut()[t][j] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe.tensors_mut()[t][j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let scale = a.abs().max(numeric.abs());
            let diff = (a - numeric).abs();
            if scale >= ABS_REGIME_THRESHOLD {
                report.n_relative += 1;
                let rel = diff / scale;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((names[t].clone(), j));
                }
            } else {
                report.n_absolute += 1;
                report.max_abs_error = report.max_abs_error.max(diff);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::model::sample_masks;
    use crate::nets::tests::small_config;
    use crate::rng::SeededRng;

    fn batch(seed: u64, n: usize, d: usize, c: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = SeededRng::new(seed);
        let x = Array2::from_shape_simple_fn((n, d), || rng.normal());
        let y = Array2::from_shape_simple_fn((n, c), || if rng.bernoulli(0.3) { 1.0 } else { 0.0 });
        (x, y)
    }

    #[test]
    fn small_net_passes() {
        let cfg = small_config(11);
        let p = ToyNetParams::init(&cfg).unwrap();
        let (x, y) = batch(12, 4, 6, 3);
        let r = grad_check(&cfg, &p, x.view(), y.view(), None).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.max_abs_error < 1e-8, "{r:?}");
        assert_eq!(r.n_relative + r.n_absolute, p.n_params());
    }

    #[test]
    fn frozen_masks_pass_and_unfrozen_are_rejected() {
        let mut cfg = small_config(13);
        cfg.dropout_rate = 0.3;
        let p = ToyNetParams::init(&cfg).unwrap();
        let (x, y) = batch(14, 5, 6, 3);
        assert!(matches!(
            grad_check(&cfg, &p, x.view(), y.view(), None),
            Err(Error::InvalidArgument(_))
        ));
        let masks = sample_masks(&cfg, 5, &mut SeededRng::new(15)).unwrap();
        let r = grad_check(&cfg, &p, x.view(), y.view(), Some(&masks)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn near_converged_net_uses_absolute_regime() {
        // Zero targets and a strongly negative output bias leave every
        // gradient tiny.
        let mut cfg = small_config(16);
        cfg.use_gated_output = false;
        let mut p = ToyNetParams::init(&cfg).unwrap();
        p.w_out.fill(0.0);
        p.b_out.fill(-30.0);
        let (x, _) = batch(17, 3, 6, 3);
        let y = Array2::zeros((3, 3));
        let r = grad_check(&cfg, &p, x.view(), y.view(), None).unwrap();
        assert_eq!(r.n_relative, 0);
        assert!(r.max_abs_error < 1e-8, "{r:?}");
    }
}
