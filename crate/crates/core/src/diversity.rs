//! Non-pairwise ensemble diversity per class: interrater agreement and the
//! entropy measure, plus exhaustive sweeps over model subsets.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ensure_same_dims, fmt_f64, OracleMatrix};

/// Largest model pool the exhaustive subset sweep accepts.
pub const MAX_SWEEP_MODELS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Entropy,
    Kappa,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Entropy => "entropy",
            Measure::Kappa => "kappa",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Measure::Entropy),
            "kappa" => Ok(Measure::Kappa),
            other => Err(Error::InvalidArgument(format!("unknown diversity measure {other:?}"))),
        }
    }
}

fn check_pool(oracles: &[OracleMatrix], class: usize, min_models: usize) -> Result<()> {
    if oracles.len() < min_models {
        return Err(Error::InvalidArgument(format!(
            "need at least {min_models} models, got {}",
            oracles.len()
        )));
    }
    ensure_same_dims(oracles)?;
    let first = &oracles[0];
    if class >= first.n_classes() {
        return Err(Error::ClassOutOfRange {
            index: class,
            n_classes: first.n_classes(),
        });
    }
    if first.n_examples() == 0 {
        return Err(Error::InvalidArgument("oracles hold no examples".into()));
    }
    Ok(())
}

/// Number of models correct on `class` for each example.
pub fn correct_counts(oracles: &[OracleMatrix], class: usize) -> Result<Vec<u32>> {
    check_pool(oracles, class, 1)?;
    let n = oracles[0].n_examples();
    Ok((0..n)
        .map(|i| oracles.iter().map(|o| u32::from(o.get(i, class))).sum())
        .collect())
}

/// `(l, multiplicity)` pairs summarising a count vector.
fn kappa_from(counts: impl Iterator<Item = (u32, usize)> + Clone, n: usize, d: usize) -> Option<f64> {
    let (nf, df) = (n as f64, d as f64);
    let correct: f64 = counts.clone().map(|(l, m)| f64::from(l) * m as f64).sum();
    let p = correct / (nf * df);
    let denom = nf * df * (df - 1.0) * p * (1.0 - p);
    if p <= 0.0 || p >= 1.0 || denom == 0.0 {
        return None;
    }
    let disagreement: f64 = counts
        .map(|(l, m)| f64::from(l) * (df - f64::from(l)) * m as f64)
        .sum();
    Some(1.0 - disagreement / denom)
}

fn entropy_from(counts: impl Iterator<Item = (u32, usize)>, n: usize, d: usize) -> f64 {
    let d32 = d as u32;
    let half_up = d.div_ceil(2);
    let total: f64 = counts.map(|(l, m)| f64::from(l.min(d32 - l)) * m as f64).sum();
    total / (n as f64 * (d - half_up) as f64)
}

/// Interrater agreement for `class`; `None` when the mean accuracy is 0 or 1.
pub fn interrater_kappa(oracles: &[OracleMatrix], class: usize) -> Result<Option<f64>> {
    check_pool(oracles, class, 2)?;
    let l = correct_counts(oracles, class)?;
    Ok(kappa_from(l.iter().map(|&v| (v, 1)), l.len(), oracles.len()))
}

/// Entropy diversity for `class`, in [0, 1]; 0 iff every example is unanimous.
pub fn entropy_diversity(oracles: &[OracleMatrix], class: usize) -> Result<f64> {
    check_pool(oracles, class, 2)?;
    let l = correct_counts(oracles, class)?;
    Ok(entropy_from(l.iter().map(|&v| (v, 1)), l.len(), oracles.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeStats {
    pub size: usize,
    pub subset_count: usize,
    /// Statistics over subsets with a defined value; `None` if there are none.
    pub min: Option<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub undefined_count: usize,
}

/// Diversity statistics of one class for every ensemble size `2..=D`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityCurve {
    pub class_idx: usize,
    pub measure: Measure,
    pub sizes: Vec<SizeStats>,
}

impl DiversityCurve {
    pub fn at_size(&self, size: usize) -> Option<&SizeStats> {
        self.sizes.iter().find(|s| s.size == size)
    }
}

/// Lexicographic enumeration of the `k`-subsets of `0..n` as bit masks.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(u32)) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(idx.iter().fold(0u32, |m, &i| m | (1 << i)));
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            return;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

fn sweep_class(oracles: &[OracleMatrix], class: usize, measure: Measure) -> DiversityCurve {
    let d = oracles.len();
    let n = oracles[0].n_examples();
    // Examples that share a correctness pattern contribute identically.
    let mut patterns: HashMap<u32, usize> = HashMap::new();
    for i in 0..n {
        let mask = oracles
            .iter()
            .enumerate()
            .fold(0u32, |m, (b, o)| m | (u32::from(o.get(i, class)) << b));
        *patterns.entry(mask).or_default() += 1;
    }
    let mut patterns: Vec<(u32, usize)> = patterns.into_iter().collect();
    patterns.sort_unstable();

    let sizes = (2..=d)
        .map(|s| {
            let (mut count, mut undefined, mut sum) = (0usize, 0usize, 0.0f64);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for_each_subset(d, s, |subset| {
                count += 1;
                let counts = patterns.iter().map(|&(p, m)| ((p & subset).count_ones(), m));
                let value = match measure {
                    Measure::Entropy => Some(entropy_from(counts, n, s)),
                    Measure::Kappa => kappa_from(counts, n, s),
                };
                match value {
                    Some(v) => {
                        sum += v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    None => undefined += 1,
                }
            });
            let defined = count - undefined;
            SizeStats {
                size: s,
                subset_count: count,
                min: (defined > 0).then_some(lo),
                mean: (defined > 0).then(|| sum / defined as f64),
                max: (defined > 0).then_some(hi),
                undefined_count: undefined,
            }
        })
        .collect();
    DiversityCurve {
        class_idx: class,
        measure,
        sizes,
    }
}

/// Evaluates `measure` on every subset of at least two models, per class.
pub fn subset_sweep(
    oracles: &[OracleMatrix],
    classes: &[usize],
    measure: Measure,
) -> Result<Vec<DiversityCurve>> {
    if oracles.len() > MAX_SWEEP_MODELS {
        return Err(Error::TooManyModels {
            models: oracles.len(),
            cap: MAX_SWEEP_MODELS,
        });
    }
    for &c in classes {
        check_pool(oracles, c, 2)?;
    }
    Ok(classes
        .par_iter()
        .map(|&c| sweep_class(oracles, c, measure))
        .collect())
}

/// Columns: class, size, subset_count, min, mean, max, undefined_count.
pub fn write_sweep_csv<W: Write>(curves: &[DiversityCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "size", "subset_count", "min", "mean", "max", "undefined_count"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for curve in curves {
        for s in &curve.sizes {
            w.write_record([
                curve.class_idx.to_string(),
                s.size.to_string(),
                s.subset_count.to_string(),
                opt(s.min),
                opt(s.mean),
                opt(s.max),
                s.undefined_count.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))
}
