//! Thresholded correctness ("oracle") matrices and per-class accuracy analysis.

use std::io::Write;

use serde::Serialize;

use crate::data::{ensure_pred_labels, LabelSet, PredictionSet};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_REPORT_CLASSES: usize = 100;

/// Binary N x C matrix: 1 where the thresholded score agrees with the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleMatrix {
    model_name: String,
    n_examples: usize,
    n_classes: usize,
    bits: Vec<u8>,
}

impl OracleMatrix {
    pub fn from_bits(
        model_name: impl Into<String>,
        n_examples: usize,
        n_classes: usize,
        bits: Vec<u8>,
    ) -> Result<Self> {
        if bits.len() != n_examples * n_classes {
            return Err(Error::SizeMismatch {
                expected: n_examples * n_classes,
                found: bits.len(),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("oracle entries must be 0 or 1".into()));
        }
        Ok(Self {
            model_name: model_name.into(),
            n_examples,
            n_classes,
            bits,
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, example: usize, class: usize) -> bool {
        self.bits[example * self.n_classes + class] == 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

/// Scores at or above `threshold` count as predicted positive.
pub fn oracle_matrix(p: &PredictionSet, y: &LabelSet, threshold: f64) -> Result<OracleMatrix> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} not in (0, 1)"
        )));
    }
    ensure_pred_labels(p, y)?;
    let c = p.n_classes();
    let mut bits = Vec::with_capacity(p.n_examples() * c);
    for i in 0..p.n_examples() {
        let row = p.row(i);
        let mut label = vec![false; c];
        for &j in y.positives(i) {
            label[j as usize] = true;
        }
        bits.extend(
            row.iter()
                .zip(&label)
                .map(|(&s, &l)| u8::from((f64::from(s) >= threshold) == l)),
        );
    }
    OracleMatrix::from_bits(p.model_name(), p.n_examples(), c, bits)
}

/// Fraction of examples on which the model is correct for `class`.
pub fn class_accuracy(o: &OracleMatrix, class: usize) -> Result<f64> {
    if class >= o.n_classes {
        return Err(Error::ClassOutOfRange {
            index: class,
            n_classes: o.n_classes,
        });
    }
    if o.n_examples == 0 {
        return Ok(0.0);
    }
    let correct: usize = (0..o.n_examples).map(|i| usize::from(o.get(i, class))).sum();
    Ok(correct as f64 / o.n_examples as f64)
}

pub(crate) fn ensure_same_dims(oracles: &[OracleMatrix]) -> Result<()> {
    let Some(first) = oracles.first() else {
        return Err(Error::InvalidArgument("no oracle matrices given".into()));
    };
    for o in oracles {
        if o.n_examples != first.n_examples || o.n_classes != first.n_classes {
            return Err(Error::Dimension(format!(
                "oracle {:?} is {}x{}, oracle {:?} is {}x{}",
                o.model_name, o.n_examples, o.n_classes, first.model_name, first.n_examples, first.n_classes
            )));
        }
    }
    Ok(())
}

/// Per-class accuracies of several models, their deviations from the
/// per-class mean, and the model x model covariance of those deviations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracyReport {
    pub model_names: Vec<String>,
    pub classes: Vec<usize>,
    /// Fraction of examples positive for each reported class, when labels
    /// were attached.
    pub positive_rate: Option<Vec<f64>>,
    /// `accuracy[k][d]`: accuracy of model `d` on `classes[k]`.
    pub accuracy: Vec<Vec<f64>>,
    pub mean_accuracy: Vec<f64>,
    pub deviation: Vec<Vec<f64>>,
    /// `delta_a[i][j] = (1/K) sum_k deviation[k][i] * deviation[k][j]` over the
    /// K reported classes.
    pub delta_a: Vec<Vec<f64>>,
}

/// Builds the report over `classes`, or over every class when `None`.
pub fn class_accuracy_report(
    oracles: &[OracleMatrix],
    classes: Option<&[usize]>,
) -> Result<ClassAccuracyReport> {
    if oracles.len() < 2 {
        return Err(Error::InvalidArgument(
            "accuracy report needs at least two models".into(),
        ));
    }
    ensure_same_dims(oracles)?;
    let n_classes = oracles[0].n_classes;
    let classes: Vec<usize> = match classes {
        Some(c) => c.to_vec(),
        None => (0..n_classes).collect(),
    };
    let d = oracles.len();
    let mut accuracy = Vec::with_capacity(classes.len());
    for &c in &classes {
        accuracy.push(
            oracles
                .iter()
                .map(|o| class_accuracy(o, c))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mean_accuracy: Vec<f64> = accuracy.iter().map(|row| row.iter().sum::<f64>() / d as f64).collect();
    let deviation: Vec<Vec<f64>> = accuracy
        .iter()
        .zip(&mean_accuracy)
        .map(|(row, m)| row.iter().map(|a| a - m).collect())
        .collect();
    let k = classes.len().max(1) as f64;
    let mut delta_a = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let v = deviation.iter().map(|row| row[i] * row[j]).sum::<f64>() / k;
            delta_a[i][j] = v;
            delta_a[j][i] = v;
        }
    }
    Ok(ClassAccuracyReport {
        model_names: oracles.iter().map(|o| o.model_name.clone()).collect(),
        classes,
        positive_rate: None,
        accuracy,
        mean_accuracy,
        deviation,
        delta_a,
    })
}

impl ClassAccuracyReport {
    pub fn attach_positive_rates(&mut self, y: &LabelSet) {
        let counts = y.class_counts();
        let n = y.n_examples().max(1) as f64;
        self.positive_rate = Some(self.classes.iter().map(|&c| counts[c] as f64 / n).collect());
    }

    /// One row per class: class, positive rate, mean accuracy, then per-model
    /// accuracy and deviation columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["class".to_string(), "positive_rate".into(), "mean_accuracy".into()];
        header.extend(self.model_names.iter().map(|m| format!("acc_{m}")));
        header.extend(self.model_names.iter().map(|m| format!("dev_{m}")));
        w.write_record(&header)?;
        for (k, &c) in self.classes.iter().enumerate() {
            let mut row = vec![
                c.to_string(),
                self.positive_rate
                    .as_ref()
                    .map(|r| fmt_f64(r[k]))
                    .unwrap_or_default(),
                fmt_f64(self.mean_accuracy[k]),
            ];
            row.extend(self.accuracy[k].iter().map(|&v| fmt_f64(v)));
            row.extend(self.deviation[k].iter().map(|&v| fmt_f64(v)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<report csv>", e))
    }

    /// The deviation covariance matrix with a model-name header row and column.
    pub fn write_delta_a_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model".to_string()];
        header.extend(self.model_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.model_names.iter().zip(&self.delta_a) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<delta_a csv>", e))
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.10}")
}

/// Classes ordered by descending positive count, ties by ascending index.
pub fn top_frequency_classes(y: &LabelSet, m: usize) -> Vec<usize> {
    let counts = y.class_counts();
    let mut order: Vec<usize> = (0..y.n_classes()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(m.min(order.len()));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    fn labels() -> LabelSet {
        LabelSet::new(ids(3), 3, vec![vec![0], vec![1, 2], vec![]]).unwrap()
    }

    fn from_labels(y: &LabelSet, flip: bool) -> PredictionSet {
        let c = y.n_classes();
        let scores = (0..y.n_examples())
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| if y.is_positive(i, j) != flip { 1.0 } else { 0.0 })
            .collect();
        PredictionSet::new("m", y.example_ids().to_vec(), c, scores).unwrap()
    }

    #[test]
    fn exact_copy_is_all_ones() {
        let y = labels();
        let o = oracle_matrix(&from_labels(&y, false), &y, 0.5).unwrap();
        assert!(o.bits().iter().all(|&b| b == 1));
        for c in 0..3 {
            assert_eq!(class_accuracy(&o, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn complement_is_all_zeros() {
        let y = labels();
        let o = oracle_matrix(&from_labels(&y, true), &y, 0.5).unwrap();
        assert!(o.bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn threshold_is_inclusive() {
        let y = LabelSet::new(ids(1), 2, vec![vec![0]]).unwrap();
        let p = PredictionSet::new("m", ids(1), 2, vec![0.5, 0.5]).unwrap();
        let o = oracle_matrix(&p, &y, 0.5).unwrap();
        assert!(o.get(0, 0));
        assert!(!o.get(0, 1));
        assert!(oracle_matrix(&p, &y, 1.0).is_err());
    }

    #[test]
    fn accuracy_three_of_four() {
        let o = OracleMatrix::from_bits("m", 4, 1, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(class_accuracy(&o, 0).unwrap(), 0.75);
        assert!(class_accuracy(&o, 1).is_err());
    }

    #[test]
    fn accuracy_matches_direct_loop() {
        let mut rng = SeededRng::new(9);
        let bits: Vec<u8> = (0..30).map(|_| u8::from(rng.bernoulli(0.6))).collect();
        let o = OracleMatrix::from_bits("m", 5, 6, bits.clone()).unwrap();
        for c in 0..6 {
            let mut s = 0.0;
            for i in 0..5 {
                s += f64::from(bits[i * 6 + c]);
            }
            assert_eq!(class_accuracy(&o, c).unwrap(), s / 5.0);
        }
    }

    #[test]
    fn identical_oracles_have_zero_deviation() {
        let o = OracleMatrix::from_bits("a", 2, 2, vec![1, 0, 1, 1]).unwrap();
        let r = class_accuracy_report(&[o.clone(), o], None).unwrap();
        assert!(r.deviation.iter().flatten().all(|&v| v == 0.0));
        assert!(r.delta_a.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn two_model_delta_a_arithmetic() {
        // 10 examples, 3 classes: model a correct on 8 of 10, model b on 6.
        let n = 10;
        let mk = |name: &str, correct: usize| {
            let bits = (0..n).flat_map(|i| [u8::from(i < correct); 3]).collect();
            OracleMatrix::from_bits(name, n, 3, bits).unwrap()
        };
        let r = class_accuracy_report(&[mk("a", 8), mk("b", 6)], None).unwrap();
        for row in &r.deviation {
            assert!((row[0] - 0.1).abs() < 1e-12 && (row[1] + 0.1).abs() < 1e-12);
        }
        let want = [[0.01, -0.01], [-0.01, 0.01]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((r.delta_a[i][j] - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_matches_double_loop() {
        let mut rng = SeededRng::new(77);
        let (n, c, d) = (7, 5, 3);
        let oracles: Vec<OracleMatrix> = (0..d)
            .map(|m| {
                let bits = (0..n * c).map(|_| u8::from(rng.bernoulli(0.7))).collect();
                OracleMatrix::from_bits(format!("m{m}"), n, c, bits).unwrap()
            })
            .collect();
        let r = class_accuracy_report(&oracles, None).unwrap();
        let mut acc = vec![vec![0.0; d]; c];
        for (m, o) in oracles.iter().enumerate() {
            for k in 0..c {
                for i in 0..n {
                    acc[k][m] += f64::from(o.bits()[i * c + k]) / n as f64;
                }
            }
        }
        let mut dev = acc.clone();
        for row in dev.iter_mut() {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for row in &dev {
                    s += row[i] * row[j];
                }
                assert!((r.delta_a[i][j] - s / c as f64).abs() < 1e-12);
            }
        }
        for (k, row) in acc.iter().enumerate() {
            for m in 0..d {
                assert!((r.accuracy[k][m] - row[m]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_needs_two_matching_models() {
        let a = OracleMatrix::from_bits("a", 1, 2, vec![1, 1]).unwrap();
        let b = OracleMatrix::from_bits("b", 2, 1, vec![1, 1]).unwrap();
        assert!(class_accuracy_report(std::slice::from_ref(&a), None).is_err());
        assert!(matches!(class_accuracy_report(&[a, b], None), Err(Error::Dimension(_))));
    }

    #[test]
    fn top_frequency_order() {
        let y = LabelSet::new(
            ids(4),
            8,
            vec![vec![2, 4, 7], vec![2, 7], vec![2, 4], vec![1]],
        )
        .unwrap();
        let top = top_frequency_classes(&y, 3);
        assert_eq!(top, vec![2, 4, 7]);
        let all = top_frequency_classes(&y, 8);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn report_invariants(seed in any::<u64>(), d in 2usize..5) {
            let mut rng = SeededRng::new(seed);
            let (n, c) = (1 + rng.below(6), 1 + rng.below(6));
            let oracles: Vec<OracleMatrix> = (0..d)
                .map(|m| {
                    let bits = (0..n * c).map(|_| u8::from(rng.bernoulli(0.5))).collect();
                    OracleMatrix::from_bits(format!("m{m}"), n, c, bits).unwrap()
                })
                .collect();
            let r = class_accuracy_report(&oracles, None).unwrap();
            for row in &r.deviation {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
            for i in 0..d {
                prop_assert!(r.delta_a[i][i] >= 0.0);
                for j in 0..d {
                    prop_assert_eq!(r.delta_a[i][j], r.delta_a[j][i]);
                }
            }
        }
    }
}
