use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clip-level descriptor: L2-normalised frame mean and L2-normalised frame
/// standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureVector {
    /// `[mean; std]`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.std);
        v
    }

    pub fn dim(&self) -> usize {
        self.mean.len() + self.std.len()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Mean and population standard deviation of a `T x F` frame matrix over
/// time, each normalised to unit L2 norm. A zero part stays zero.
pub fn aggregate_mean_std(frames: ArrayView2<'_, f64>) -> Result<FeatureVector> {
    let t = frames.nrows();
    if t == 0 {
        return Err(Error::InvalidArgument("cannot aggregate an empty frame set".into()));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("frame features contain non-finite values".into()));
    }
    let mean = frames.mean_axis(Axis(0)).expect("t >= 1");
    let mut var = Array1::<f64>::zeros(frames.ncols());
    for row in frames.rows() {
        var.zip_mut_with(&(&row - &mean), |v, d| *v += d * d);
    }
    let mut std: Vec<f64> = var.iter().map(|v| (v / t as f64).sqrt()).collect();
    let mut mean = mean.to_vec();
    l2_normalize(&mut mean);
    l2_normalize(&mut std);
    Ok(FeatureVector { mean, std })
}

/// Context gating: `x * sigmoid(w_g x + b_g)`.
pub fn gated_layer_forward(
    x: ArrayView1<'_, f64>,
    w_g: ArrayView2<'_, f64>,
    b_g: Option<ArrayView1<'_, f64>>,
) -> Result<Array1<f64>> {
    let n = x.len();
    if w_g.dim() != (n, n) || b_g.is_some_and(|b| b.len() != n) {
        return Err(Error::Dimension(format!(
            "gate weights {:?} do not match input of length {n}",
            w_g.dim()
        )));
    }
    let mut s = w_g.dot(&x);
    if let Some(b) = b_g {
        s += &b;
    }
    Ok(&x * &s.mapv(sigmoid))
}

/// Residual block: `c2 (mask * relu(c1 x)) + x`, where `mask` already carries
/// the inverted-dropout scale `1 / (1 - p)` on kept units.
pub fn resnet_block_forward(
    x: ArrayView1<'_, f64>,
    c1: ArrayView2<'_, f64>,
    c2: ArrayView2<'_, f64>,
    mask: Option<ArrayView1<'_, f64>>,
) -> Result<Array1<f64>> {
    let (h, d) = c1.dim();
    if d != x.len() || c2.dim() != (d, h) || mask.is_some_and(|m| m.len() != h) {
        return Err(Error::Dimension(format!(
            "block weights {:?}/{:?} do not fit input of length {}",
            c1.dim(),
            c2.dim(),
            x.len()
        )));
    }
    let mut r = c1.dot(&x).mapv(|v| v.max(0.0));
    if let Some(m) = mask {
        r *= &m;
    }
    Ok(c2.dot(&r) + x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn identical_frames_have_zero_std() {
        let f = array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]];
        let v = aggregate_mean_std(f.view()).unwrap();
        assert_eq!(v.mean, vec![0.6, 0.8]);
        assert_eq!(v.std, vec![0.0, 0.0]);
    }

    #[test]
    fn two_frame_scalar_case() {
        let f = array![[1.0], [3.0]];
        assert_eq!(aggregate_mean_std(f.view()).unwrap().concat(), vec![1.0, 1.0]);
    }

    #[test]
    fn empty_frames_rejected() {
        let f = Array2::<f64>::zeros((0, 3));
        assert!(aggregate_mean_std(f.view()).is_err());
    }

    #[test]
    fn mean_std_matches_loops() {
        let mut rng = SeededRng::new(3);
        let f = Array2::from_shape_simple_fn((5, 3), || rng.normal());
        let v = aggregate_mean_std(f.view()).unwrap();
        let mut mu = [0.0; 3];
        let mut sd = [0.0; 3];
        for j in 0..3 {
            for i in 0..5 {
                mu[j] += f[[i, j]];
            }
            mu[j] /= 5.0;
            for i in 0..5 {
                sd[j] += (f[[i, j]] - mu[j]).powi(2);
            }
            sd[j] = (sd[j] / 5.0).sqrt();
        }
        let nm = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ns = sd.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..3 {
            assert!((v.mean[j] - mu[j] / nm).abs() < 1e-12);
            assert!((v.std[j] - sd[j] / ns).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_saturation_limits() {
        let x = array![0.5, -2.0, 3.0];
        let w = Array2::zeros((3, 3));
        let open = gated_layer_forward(x.view(), w.view(), Some(array![40.0, 40.0, 40.0].view())).unwrap();
        let shut = gated_layer_forward(x.view(), w.view(), Some(array![-40.0, -40.0, -40.0].view())).unwrap();
        for i in 0..3 {
            assert!((open[i] - x[i]).abs() < 1e-12);
            assert!(shut[i].abs() < 1e-12);
        }
    }

    #[test]
    fn gate_matches_direct_computation() {
        let x = array![0.2, -0.7];
        let w = array![[0.5, -1.0], [0.3, 0.8]];
        let b = array![0.1, -0.2];
        let y = gated_layer_forward(x.view(), w.view(), Some(b.view())).unwrap();
        let s0: f64 = 0.5 * 0.2 + -1.0 * -0.7 + 0.1;
        let s1: f64 = 0.3 * 0.2 + 0.8 * -0.7 - 0.2;
        assert!((y[0] - 0.2 / (1.0 + (-s0).exp())).abs() < 1e-15);
        assert!((y[1] - -0.7 / (1.0 + (-s1).exp())).abs() < 1e-15);
        assert!(gated_layer_forward(x.view(), Array2::zeros((3, 3)).view(), None).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let x = array![1.5, -0.25, 2.0];
        let c1 = Array2::zeros((4, 3));
        let c2 = Array2::zeros((3, 4));
        assert_eq!(resnet_block_forward(x.view(), c1.view(), c2.view(), None).unwrap(), x);
        let mut rng = SeededRng::new(1);
        let c1 = Array2::from_shape_simple_fn((4, 3), || rng.normal());
        let c2 = Array2::from_shape_simple_fn((3, 4), || rng.normal());
        let zero_mask = Array1::zeros(4);
        assert_eq!(resnet_block_forward(x.view(), c1.view(), c2.view(), Some(zero_mask.view())).unwrap(), x);
    }

    #[test]
    fn block_matches_hand_computation() {
        let x = array![1.0, -1.0, 0.5];
        let c1 = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 2.0]];
        let c2 = array![[1.0, 1.0, 1.0], [0.0, 2.0, 0.0], [0.5, 0.0, -1.0]];
        let m = array![2.0, 2.0, 0.0];
        // relu(c1 x) = [1, 0, 1]; masked = [2, 0, 0]; c2 * that = [2, 0, 1].
        let y = resnet_block_forward(x.view(), c1.view(), c2.view(), Some(m.view())).unwrap();
        assert_eq!(y, array![3.0, -1.0, 1.5]);
    }

    proptest! {
        #[test]
        fn gate_never_amplifies(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = SeededRng::new(seed);
            let x = Array1::from_shape_simple_fn(n, || 3.0 * rng.normal());
            let w = Array2::from_shape_simple_fn((n, n), || rng.normal());
            let b = Array1::from_shape_simple_fn(n, || rng.normal());
            let y = gated_layer_forward(x.view(), w.view(), Some(b.view())).unwrap();
            for i in 0..n {
                prop_assert!(y[i].abs() <= x[i].abs());
            }
        }
    }
}
