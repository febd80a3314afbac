//! Submission-style export: `VideoId,LabelConfidencePairs`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::PredictionSet;
use crate::error::{Error, Result};

pub const KAGGLE_TOP_K: usize = 20;

/// Six significant digits, trailing zeros trimmed (like C's `%g` for values
/// in [0, 1]). Scores are clamped to [0, 1] first.
pub fn format_score(score: f32) -> String {
    let v = f64::from(score).clamp(0.0, 1.0);
    if v == 0.0 {
        return "0".into();
    }
    let exponent = v.log10().floor() as i32;
    let decimals = (5 - exponent).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Top classes of one row, by descending score then ascending class.
pub(crate) fn top_classes(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let k = k.min(row.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.truncate(k);
    idx
}

pub fn write_kaggle_csv(p: &PredictionSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "VideoId,LabelConfidencePairs").map_err(io)?;
    for i in 0..p.n_examples() {
        let row = p.row(i);
        let pairs = top_classes(row, KAGGLE_TOP_K)
            .into_iter()
            .map(|c| format!("{c} {}", format_score(row[c])))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{},{}", p.example_ids()[i], pairs).map_err(io)?;
    }
    w.flush().map_err(io)
}
