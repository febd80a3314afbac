//! Global average precision over pooled per-example top-k predictions.

use crate::data::{ensure_pred_labels, LabelSet, PredictionSet};
use crate::error::{Error, Result};

/// One entry of the pooled ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledEntry {
    pub score: f32,
    pub example: usize,
    pub class: usize,
    pub positive: bool,
}

/// Per-example top-k entries, pooled and sorted by descending score, then
/// ascending example index, then ascending class index.
pub fn pooled_top_k(p: &PredictionSet, y: &LabelSet, k: usize) -> Result<Vec<PooledEntry>> {
    ensure_pred_labels(p, y)?;
    pooled_raw(p.scores(), p.n_classes(), y, k)
}

fn pooled_raw(scores: &[f32], n_classes: usize, y: &LabelSet, k: usize) -> Result<Vec<PooledEntry>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n_classes != y.n_classes() || scores.len() != y.n_examples() * n_classes {
        return Err(Error::Dimension(format!(
            "{} scores over {} classes do not match {} labelled examples over {} classes",
            scores.len(),
            n_classes,
            y.n_examples(),
            y.n_classes()
        )));
    }
    let take = k.min(n_classes);
    let mut pooled = Vec::with_capacity(y.n_examples() * take);
    let mut idx: Vec<usize> = Vec::with_capacity(n_classes);
    for i in 0..y.n_examples() {
        let row = &scores[i * n_classes..(i + 1) * n_classes];
        idx.clear();
        idx.extend(0..n_classes);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if take < idx.len() {
            idx.select_nth_unstable_by(take - 1, cmp);
        }
        for &c in &idx[..take] {
            pooled.push(PooledEntry {
                score: row[c],
                example: i,
                class: c,
                positive: y.is_positive(i, c),
            });
        }
    }
    pooled.sort_unstable_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.example.cmp(&b.example))
            .then(a.class.cmp(&b.class))
    });
    Ok(pooled)
}

/// Expected sum of precision-at-hit over a block of `n` tied items holding
/// `m` positives, averaged over all orderings of the block. `ranks_before`
/// items (with `hits_before` positives) precede the block.
fn tied_block_contribution(ranks_before: usize, hits_before: usize, n: usize, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let (r0, c0) = (ranks_before as f64, hits_before as f64);
    if n == 1 {
        return (c0 + 1.0) / (r0 + 1.0);
    }
    let (nf, mf) = (n as f64, m as f64);
    let p_hit = mf / nf;
    let extra = (mf - 1.0) / (nf - 1.0);
    (1..=n)
        .map(|t| {
            let t = t as f64;
            p_hit * (c0 + 1.0 + (t - 1.0) * extra) / (r0 + t)
        })
        .sum()
}

/// Average precision of a ranked list of (score, positive) pairs sorted by
/// descending score. Runs of equal scores are averaged over their orderings.
/// Returns 0 when the list holds no positives.
pub fn average_precision_sorted(scores: &[f32], positive: &[bool]) -> f64 {
    debug_assert_eq!(scores.len(), positive.len());
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let (mut start, mut hits) = (0usize, 0usize);
    while start < scores.len() {
        let mut end = start + 1;
        while end < scores.len() && scores[end] == scores[start] {
            end += 1;
        }
        let m = positive[start..end].iter().filter(|&&p| p).count();
        sum += tied_block_contribution(start, hits, end - start, m);
        hits += m;
        start = end;
    }
    sum / total_pos as f64
}

/// GAP@k: average precision over the pooled top-k predictions of all
/// examples. Tied scores are averaged over orderings, so the value does not
/// depend on example order.
pub fn gap_at_k(p: &PredictionSet, y: &LabelSet, k: usize) -> Result<f64> {
    ensure_pred_labels(p, y)?;
    gap_at_k_scores(p.scores(), p.n_classes(), y, k)
}

/// GAP@k over a raw row-major score buffer whose rows line up with `y`.
pub fn gap_at_k_scores(scores: &[f32], n_classes: usize, y: &LabelSet, k: usize) -> Result<f64> {
    let pooled = pooled_raw(scores, n_classes, y, k)?;
    let scores: Vec<f32> = pooled.iter().map(|e| e.score).collect();
    let positive: Vec<bool> = pooled.iter().map(|e| e.positive).collect();
    Ok(average_precision_sorted(&scores, &positive))
}
