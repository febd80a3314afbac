//! Correlation-guided greedy ensembling with quadratic weight fitting.

use serde::{Deserialize, Serialize};

use super::weights::EnsembleWeights;
use crate::data::{ensure_aligned, ensure_all_aligned, ensure_pred_labels, LabelSet, PredictionSet};
use crate::error::{Error, Result};
use crate::metrics::{gap_at_k_scores, DEFAULT_GAP_K};

/// Default mixing weights sampled before the quadratic fit.
pub const DEFAULT_GRID: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Leading coefficient below `-CONCAVITY_EPS` counts as concave.
pub const CONCAVITY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    #[default]
    Pearson,
    Spearman,
}

/// Pearson r of two equally long vectors, `None` if either has zero variance.
/// Uses a single-pass co-moment update.
pub fn pearson_slices(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let (mut mean_a, mut mean_b) = (0.0, 0.0);
    let (mut m2a, mut m2b, mut cab) = (0.0, 0.0, 0.0);
    for (n, (&x, &y)) in a.iter().zip(b).enumerate() {
        let k = (n + 1) as f64;
        let dx = x - mean_a;
        mean_a += dx / k;
        let dy = y - mean_b;
        mean_b += dy / k;
        m2a += dx * (x - mean_a);
        m2b += dy * (y - mean_b);
        cab += dx * (y - mean_b);
    }
    if m2a <= 0.0 || m2b <= 0.0 {
        return None;
    }
    Some((cab / (m2a.sqrt() * m2b.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn correlate(a: &[f64], b: &[f64], kind: CorrelationKind) -> Option<f64> {
    match kind {
        CorrelationKind::Pearson => pearson_slices(a, b),
        CorrelationKind::Spearman => pearson_slices(&average_ranks(a), &average_ranks(b)),
    }
}

fn as_f64(p: &PredictionSet) -> Vec<f64> {
    p.scores().iter().map(|&s| f64::from(s)).collect()
}

/// Pearson correlation over the flattened N*C scores; `None` when either set
/// is constant.
pub fn pearson_correlation(a: &PredictionSet, b: &PredictionSet) -> Result<Option<f64>> {
    if a.n_classes() != b.n_classes() {
        return Err(Error::SizeMismatch {
            expected: a.n_classes(),
            found: b.n_classes(),
        });
    }
    ensure_aligned(a.example_ids(), b.example_ids())?;
    Ok(pearson_slices(&as_f64(a), &as_f64(b)))
}

/// Result of fitting the mixing weight of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    /// Chosen weight of the first member; the second gets `1 - w_star`.
    pub w_star: f64,
    /// `(w, GAP)` samples at the grid points.
    pub samples: Vec<(f64, f64)>,
    /// Least-squares `g(w) = a w^2 + b w + c`, as `[a, b, c]`.
    pub coefficients: [f64; 3],
    /// Unclamped vertex `-b / 2a` when the fit is concave.
    pub vertex: Option<f64>,
    /// True when the fit was not concave and the grid argmax was used.
    pub fallback: bool,
}

impl PairFit {
    pub fn best_sample(&self) -> (f64, f64) {
        best_of(&self.samples)
    }
}

/// Highest GAP; ties go to the smallest weight.
fn best_of(samples: &[(f64, f64)]) -> (f64, f64) {
    let mut best = samples[0];
    for &(w, g) in &samples[1..] {
        if g > best.1 || (g == best.1 && w < best.0) {
            best = (w, g);
        }
    }
    best
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|&w| !(w > 0.0 && w < 1.0)) {
        return Err(Error::InvalidArgument("grid weights must lie in (0, 1)".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < 3 {
        return Err(Error::InvalidArgument(
            "grid needs at least three distinct weights".into(),
        ));
    }
    Ok(())
}

/// Least-squares quadratic through `(x, y)` points, returned as `[a, b, c]`.
pub fn fit_quadratic(points: &[(f64, f64)]) -> [f64; 3] {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    // Normal equations in the centred variable u = x - mean_x.
    let mut s = [0.0f64; 5];
    let mut t = [0.0f64; 3];
    for &(x, y) in points {
        let u = x - mean_x;
        let mut pow = 1.0;
        for (k, sk) in s.iter_mut().enumerate() {
            *sk += pow;
            if k < 3 {
                t[k] += pow * y;
            }
            pow *= u;
        }
    }
    // Unknowns ordered [c', b', a'] so that row k reads sum_j s[k+j] x_j = t[k].
    let mut m = [
        [s[0], s[1], s[2], t[0]],
        [s[1], s[2], s[3], t[1]],
        [s[2], s[3], s[4], t[2]],
    ];
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col && m[col][col] != 0.0 {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let solve = |i: usize| if m[i][i] == 0.0 { 0.0 } else { m[i][3] / m[i][i] };
    let (c0, b0, a0) = (solve(0), solve(1), solve(2));
    [a0, b0 - 2.0 * a0 * mean_x, a0 * mean_x * mean_x - b0 * mean_x + c0]
}

struct Evaluator<'a> {
    y: &'a LabelSet,
    n_classes: usize,
    k: usize,
    buf: Vec<f32>,
}

impl Evaluator<'_> {
    fn mix_gap(&mut self, a: &[f64], b: &[f64], w: f64) -> Result<f64> {
        self.buf.clear();
        self.buf
            .extend(a.iter().zip(b).map(|(&x, &z)| (w * x + (1.0 - w) * z) as f32));
        gap_at_k_scores(&self.buf, self.n_classes, self.y, self.k)
    }
}

fn fit_pair_raw(a: &[f64], b: &[f64], grid: &[f64], eval: &mut Evaluator<'_>) -> Result<PairFit> {
    validate_grid(grid)?;
    let mut samples = Vec::with_capacity(grid.len());
    for &w in grid {
        samples.push((w, eval.mix_gap(a, b, w)?));
    }
    let coefficients = fit_quadratic(&samples);
    let [qa, qb, _] = coefficients;
    if qa < -CONCAVITY_EPS {
        let vertex = -qb / (2.0 * qa);
        Ok(PairFit {
            w_star: vertex.clamp(0.0, 1.0),
            samples,
            coefficients,
            vertex: Some(vertex),
            fallback: false,
        })
    } else {
        let w_star = best_of(&samples).0;
        Ok(PairFit {
            w_star,
            samples,
            coefficients,
            vertex: None,
            fallback: true,
        })
    }
}

/// Fits the weight `w` of `a` in `w * a + (1 - w) * b` by sampling GAP@k on
/// `grid` and maximising a least-squares quadratic. The vertex is clamped to
/// [0, 1]; a non-concave fit falls back to the best grid point.
pub fn fit_pair_weight(
    a: &PredictionSet,
    b: &PredictionSet,
    y: &LabelSet,
    grid: &[f64],
    k: usize,
) -> Result<PairFit> {
    ensure_pred_labels(a, y)?;
    ensure_pred_labels(b, y)?;
    let mut eval = Evaluator {
        y,
        n_classes: a.n_classes(),
        k,
        buf: Vec::new(),
    };
    fit_pair_raw(&as_f64(a), &as_f64(b), grid, &mut eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyOptions {
    pub grid: Vec<f64>,
    pub k: usize,
    /// Stop once this many models are in the ensemble (at least 2).
    pub max_models: Option<usize>,
    pub correlation: CorrelationKind,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID.to_vec(),
            k: DEFAULT_GAP_K,
            max_models: None,
            correlation: CorrelationKind::Pearson,
        }
    }
}

/// One merge of the running ensemble with a candidate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    /// Index of the model merged in this step.
    pub model_index: usize,
    pub model_name: String,
    /// Correlation between the running ensemble (or seed model) and the
    /// candidate when it was chosen.
    pub correlation: Option<f64>,
    pub fit: PairFit,
    /// Weight kept by the running ensemble; the candidate gets `1 - w`.
    pub accepted_w: f64,
    pub gap_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    pub correlation_matrix: Vec<Vec<Option<f64>>>,
    pub seed_pair: (usize, usize),
    /// Model indices in the order they entered the ensemble.
    pub order: Vec<usize>,
    pub steps: Vec<MergeStep>,
}

impl GreedyTrace {
    pub fn final_gap(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.gap_after)
    }
}

/// Picks the weight to accept for a merge: the fitted `w_star` unless a grid
/// point (or, after the seed merge, leaving the ensemble unchanged) scores
/// higher.
fn guarded_weight(
    fit: &PairFit,
    a: &[f64],
    b: &[f64],
    allow_keep: bool,
    eval: &mut Evaluator<'_>,
) -> Result<(f64, f64)> {
    let mut best = (fit.w_star, eval.mix_gap(a, b, fit.w_star)?);
    let mut challengers = fit.samples.clone();
    if allow_keep {
        challengers.push((1.0, eval.mix_gap(a, b, 1.0)?));
    }
    for (w, g) in challengers {
        if g > best.1 {
            best = (w, g);
        }
    }
    Ok(best)
}

/// Greedy ensembling: start from the least-correlated pair, then repeatedly
/// merge the model least correlated with the running ensemble, each time
/// fitting the mixing weight on GAP@k.
pub fn greedy_correlation_ensemble(
    preds: &[PredictionSet],
    y: &LabelSet,
    opts: &GreedyOptions,
) -> Result<(EnsembleWeights, GreedyTrace)> {
    let d = preds.len();
    if d < 2 {
        return Err(Error::InvalidArgument("greedy ensembling needs at least two models".into()));
    }
    ensure_all_aligned(preds)?;
    ensure_pred_labels(&preds[0], y)?;
    validate_grid(&opts.grid)?;
    let limit = opts.max_models.unwrap_or(d).clamp(2, d);

    let raw: Vec<Vec<f64>> = preds.iter().map(as_f64).collect();
    let mut corr = vec![vec![None; d]; d];
    for i in 0..d {
        corr[i][i] = correlate(&raw[i], &raw[i], opts.correlation);
        for j in i + 1..d {
            let r = correlate(&raw[i], &raw[j], opts.correlation);
            corr[i][j] = r;
            corr[j][i] = r;
        }
    }
    let mut seed_pair = None;
    for i in 0..d {
        for j in i + 1..d {
            if let Some(r) = corr[i][j] {
                if seed_pair.is_none_or(|(_, _, best)| r < best) {
                    seed_pair = Some((i, j, r));
                }
            }
        }
    }
    let Some((first, second, seed_r)) = seed_pair else {
        return Err(Error::UndefinedCorrelation(
            "no pair of models has a defined correlation".into(),
        ));
    };

    let mut eval = Evaluator {
        y,
        n_classes: preds[0].n_classes(),
        k: opts.k,
        buf: Vec::new(),
    };
    let mut alpha = vec![0.0; d];
    let mut order = vec![first, second];
    let mut steps = Vec::with_capacity(d - 1);

    let fit = fit_pair_raw(&raw[first], &raw[second], &opts.grid, &mut eval)?;
    let (w, gap) = guarded_weight(&fit, &raw[first], &raw[second], false, &mut eval)?;
    alpha[first] = w;
    alpha[second] = 1.0 - w;
    let mut ensemble: Vec<f64> = raw[first]
        .iter()
        .zip(&raw[second])
        .map(|(&a, &b)| w * a + (1.0 - w) * b)
        .collect();
    steps.push(MergeStep {
        model_index: second,
        model_name: preds[second].model_name().to_owned(),
        correlation: Some(seed_r),
        fit,
        accepted_w: w,
        gap_after: gap,
    });

    let mut remaining: Vec<usize> = (0..d).filter(|&m| m != first && m != second).collect();
    while !remaining.is_empty() && order.len() < limit {
        let mut pick: Option<(usize, Option<f64>)> = None;
        for (pos, &m) in remaining.iter().enumerate() {
            let r = correlate(&ensemble, &raw[m], opts.correlation);
            let better = match (pick, r) {
                (None, _) => true,
                (Some((_, None)), Some(_)) => true,
                (Some((_, Some(best))), Some(r)) => r < best,
                _ => false,
            };
            if better {
                pick = Some((pos, r));
            }
        }
        let (pos, r) = pick.expect("remaining is non-empty");
        let m = remaining.remove(pos);
        let fit = fit_pair_raw(&ensemble, &raw[m], &opts.grid, &mut eval)?;
        let (w, gap) = guarded_weight(&fit, &ensemble, &raw[m], true, &mut eval)?;
        for &i in &order {
            alpha[i] *= w;
        }
        alpha[m] = 1.0 - w;
        for (e, &s) in ensemble.iter_mut().zip(&raw[m]) {
            *e = w * *e + (1.0 - w) * s;
        }
        order.push(m);
        steps.push(MergeStep {
            model_index: m,
            model_name: preds[m].model_name().to_owned(),
            correlation: r,
            fit,
            accepted_w: w,
            gap_after: gap,
        });
    }

    let names = preds.iter().map(|p| p.model_name().to_owned()).collect();
    Ok((
        EnsembleWeights::per_model(names, alpha),
        GreedyTrace {
            correlation_matrix: corr,
            seed_pair: (first, second),
            order,
            steps,
        },
    ))
}
