//! Prediction and label sets, row selection, and example-set splitting.

mod container;
mod kaggle;
mod labels;
mod predictions;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};

pub use container::{Container, Dtype, CONTAINER_MAGIC, CONTAINER_VERSION, HEADER_LEN};
pub use kaggle::{format_score, write_kaggle_csv, KAGGLE_TOP_K};
pub use labels::{load_labels, save_labels, sidecar_path};
pub use predictions::{load_predictions, load_predictions_with, save_predictions, LoadOptions, Loaded};

/// Dense N x C confidence scores produced by one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    model_name: String,
    n_examples: usize,
    n_classes: usize,
    scores: Vec<f32>,
    example_ids: Vec<String>,
}

impl PredictionSet {
    pub fn new(
        model_name: impl Into<String>,
        example_ids: Vec<String>,
        n_classes: usize,
        scores: Vec<f32>,
    ) -> Result<Self> {
        let n_examples = example_ids.len();
        if scores.len() != n_examples * n_classes {
            return Err(Error::SizeMismatch {
                expected: n_examples * n_classes,
                found: scores.len(),
            });
        }
        if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n_classes.max(1),
                col: pos % n_classes.max(1),
            });
        }
        check_unique_ids(&example_ids)?;
        Ok(Self {
            model_name: model_name.into(),
            n_examples,
            n_classes,
            scores,
            example_ids,
        })
    }

    /// Builds a set from 64-bit scores, rounding each to the nearest `f32`.
    pub fn from_f64(
        model_name: impl Into<String>,
        example_ids: Vec<String>,
        n_classes: usize,
        scores: &[f64],
    ) -> Result<Self> {
        Self::new(
            model_name,
            example_ids,
            n_classes,
            scores.iter().map(|&s| s as f32).collect(),
        )
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn with_model_name(mut self, name: impl Into<String>) -> Self {
        self.model_name = name.into();
        self
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn score(&self, i: usize, j: usize) -> f32 {
        self.scores[i * self.n_classes + j]
    }
}

/// Sparse binary ground truth: sorted positive class indices per example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    n_classes: usize,
    positives: Vec<Vec<u32>>,
    example_ids: Vec<String>,
}

impl LabelSet {
    /// Positive lists are sorted and deduplicated before validation.
    pub fn new(example_ids: Vec<String>, n_classes: usize, mut positives: Vec<Vec<u32>>) -> Result<Self> {
        if positives.len() != example_ids.len() {
            return Err(Error::SizeMismatch {
                expected: example_ids.len(),
                found: positives.len(),
            });
        }
        for row in positives.iter_mut() {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last as usize >= n_classes {
                    return Err(Error::ClassOutOfRange {
                        index: last as usize,
                        n_classes,
                    });
                }
            }
        }
        check_unique_ids(&example_ids)?;
        Ok(Self {
            n_classes,
            positives,
            example_ids,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.positives.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn positives(&self, i: usize) -> &[u32] {
        &self.positives[i]
    }

    pub fn is_positive(&self, i: usize, class: usize) -> bool {
        self.positives[i].binary_search(&(class as u32)).is_ok()
    }

    /// Dense 0/1 row for example `i`.
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_classes];
        for &c in &self.positives[i] {
            row[c as usize] = 1.0;
        }
        row
    }

    /// Number of positive examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for row in &self.positives {
            for &c in row {
                counts[c as usize] += 1;
            }
        }
        counts
    }
}

fn check_unique_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

/// Fails unless both id lists are identical, element by element.
pub fn ensure_aligned(left: &[String], right: &[String]) -> Result<()> {
    if left.len() != right.len() {
        return Err(Error::Misaligned(format!(
            "{} examples vs {} examples",
            left.len(),
            right.len()
        )));
    }
    if let Some(i) = left.iter().zip(right).position(|(a, b)| a != b) {
        return Err(Error::Misaligned(format!(
            "example {i} is {:?} on one side and {:?} on the other",
            left[i], right[i]
        )));
    }
    Ok(())
}

pub fn ensure_pred_labels(p: &PredictionSet, y: &LabelSet) -> Result<()> {
    if p.n_classes() != y.n_classes() {
        return Err(Error::Dimension(format!(
            "predictions have {} classes, labels have {}",
            p.n_classes(),
            y.n_classes()
        )));
    }
    ensure_aligned(p.example_ids(), y.example_ids())
}

/// Fails unless all prediction sets share example ids and class count.
pub fn ensure_all_aligned(preds: &[PredictionSet]) -> Result<()> {
    let Some(first) = preds.first() else {
        return Err(Error::InvalidArgument("no prediction sets given".into()));
    };
    for p in &preds[1..] {
        if p.n_classes() != first.n_classes() {
            return Err(Error::Dimension(format!(
                "model {:?} has {} classes, model {:?} has {}",
                p.model_name(),
                p.n_classes(),
                first.model_name(),
                first.n_classes()
            )));
        }
        ensure_aligned(first.example_ids(), p.example_ids())?;
    }
    Ok(())
}

/// Row subsetting that keeps example ids in step with the data.
pub trait SelectRows: Sized {
    /// `idx` must be strictly increasing and in range.
    fn select_rows(&self, idx: &[usize]) -> Result<Self>;
}

fn check_indices(idx: &[usize], len: usize) -> Result<()> {
    for (pos, &i) in idx.iter().enumerate() {
        if i >= len {
            return Err(Error::RowOutOfRange { index: i, len });
        }
        if pos > 0 && idx[pos - 1] >= i {
            return Err(Error::InvalidArgument(
                "row indices must be strictly increasing".into(),
            ));
        }
    }
    Ok(())
}

impl SelectRows for PredictionSet {
    fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        check_indices(idx, self.n_examples)?;
        let mut scores = Vec::with_capacity(idx.len() * self.n_classes);
        for &i in idx {
            scores.extend_from_slice(self.row(i));
        }
        Ok(Self {
            model_name: self.model_name.clone(),
            n_examples: idx.len(),
            n_classes: self.n_classes,
            scores,
            example_ids: idx.iter().map(|&i| self.example_ids[i].clone()).collect(),
        })
    }
}

impl SelectRows for LabelSet {
    fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        check_indices(idx, self.n_examples())?;
        Ok(Self {
            n_classes: self.n_classes,
            positives: idx.iter().map(|&i| self.positives[i].clone()).collect(),
            example_ids: idx.iter().map(|&i| self.example_ids[i].clone()).collect(),
        })
    }
}

/// A two-way partition of example indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fraction: f64,
    pub part_a: Vec<usize>,
    pub part_b: Vec<usize>,
}

/// Size of the first part: `round(fraction * n)` with halves rounded up.
pub fn split_size(n_examples: usize, fraction: f64) -> usize {
    ((fraction * n_examples as f64) + 0.5).floor() as usize
}

/// Deterministically partitions `0..n_examples`.
///
/// The indices are shuffled with a generator seeded from `seed`; the first
/// `split_size(n, fraction)` shuffled indices form `part_a`. Both parts are
/// returned sorted.
pub fn split_examples(n_examples: usize, seed: u64, fraction: f64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    SeededRng::derive(seed, stream::SPLIT, n_examples as u64).shuffle(&mut order);
    let cut = split_size(n_examples, fraction).min(n_examples);
    let mut part_a = order[..cut].to_vec();
    let mut part_b = order[cut..].to_vec();
    part_a.sort_unstable();
    part_b.sort_unstable();
    Ok(SplitSpec {
        seed,
        fraction,
        part_a,
        part_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ex{i}")).collect()
    }

    #[test]
    fn prediction_set_rejects_bad_shapes() {
        assert!(matches!(
            PredictionSet::new("m", ids(2), 3, vec![0.0; 5]),
            Err(Error::SizeMismatch { expected: 6, found: 5 })
        ));
        assert!(matches!(
            PredictionSet::new("m", ids(1), 2, vec![0.1, f32::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(matches!(
            PredictionSet::new("m", vec!["a".into(), "a".into()], 1, vec![0.0, 0.0]),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn label_set_validates_classes() {
        let y = LabelSet::new(ids(2), 5, vec![vec![3, 1, 3], vec![]]).unwrap();
        assert_eq!(y.positives(0), &[1, 3]);
        assert!(y.is_positive(0, 3));
        assert!(!y.is_positive(1, 3));
        assert!(matches!(
            LabelSet::new(ids(1), 5, vec![vec![5]]),
            Err(Error::ClassOutOfRange { index: 5, n_classes: 5 })
        ));
    }

    #[test]
    fn split_cardinality_and_determinism() {
        let s = split_examples(10, 7, 0.5).unwrap();
        assert_eq!(s.part_a.len(), 5);
        assert_eq!(s.part_b.len(), 5);
        assert_eq!(s, split_examples(10, 7, 0.5).unwrap());
        let mut all: Vec<usize> = s.part_a.iter().chain(&s.part_b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_rounds_half_up() {
        assert_eq!(split_examples(3, 1, 0.5).unwrap().part_a.len(), 2);
        assert_eq!(split_size(5, 0.3), 2);
        assert_eq!(split_size(0, 0.5), 0);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(split_examples(4, 0, f).is_err());
        }
    }

    #[test]
    fn select_rows_cases() {
        let p = PredictionSet::new("m", ids(3), 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(p.select_rows(&[0, 1, 2]).unwrap(), p);
        let empty = p.select_rows(&[]).unwrap();
        assert_eq!(empty.n_examples(), 0);
        let one = p.select_rows(&[1]).unwrap();
        assert_eq!(one.scores(), &[0.3, 0.4]);
        assert_eq!(one.example_ids(), &["ex1".to_string()]);
        assert!(matches!(
            p.select_rows(&[3]),
            Err(Error::RowOutOfRange { index: 3, len: 3 })
        ));
        assert!(p.select_rows(&[1, 0]).is_err());
    }

    #[test]
    fn select_rows_keeps_alignment() {
        let p = PredictionSet::new("m", ids(4), 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = LabelSet::new(ids(4), 1, vec![vec![0], vec![], vec![0], vec![]]).unwrap();
        let idx = [1, 3];
        let (ps, ys) = (p.select_rows(&idx).unwrap(), y.select_rows(&idx).unwrap());
        ensure_pred_labels(&ps, &ys).unwrap();
    }
}
