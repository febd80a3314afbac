//! Synthetic multi-label clips with head-heavy class frequencies, and
//! families of small networks trained on perturbed views of them.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combine::pearson_slices;
use crate::data::{LabelSet, PredictionSet};
use crate::error::{Error, Result};
use crate::metrics::gap_at_k;
use crate::nets::{aggregate_mean_std, fcrn_train, predict, Dataset, NetHyperParams, ToyNetConfig};
use crate::rng::{stream, sub_seed, SeededRng};

/// Probabilities of an example carrying 1, 2, 3 or 4 classes.
pub const LABEL_COUNT_PROBS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// Architecture shared by family members unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemberArch {
    pub hidden_dims: Vec<usize>,
    pub n_resnet_blocks: usize,
    pub dropout_rate: f64,
    pub use_gated_output: bool,
}

impl Default for MemberArch {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            n_resnet_blocks: 1,
            dropout_rate: 0.0,
            use_gated_output: true,
        }
    }
}

/// One family member: which view of the data it sees and how it differs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub name: String,
    /// Share of the frame feature dimensions the member sees.
    #[serde(default = "one")]
    pub feature_fraction: f64,
    /// Each training label is dropped with this probability, and each
    /// training example gains a spurious label with the same probability.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub hidden_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub n_resnet_blocks: Option<usize>,
    #[serde(default)]
    pub dropout_rate: Option<f64>,
    #[serde(default)]
    pub use_gated_output: Option<bool>,
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Fixed member seed instead of one derived from `SynthSpec::seed` and the
    /// member index.
    #[serde(default)]
    pub sub_seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

impl PredictorSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            feature_fraction: 1.0,
            label_noise: 0.0,
            hidden_dims: None,
            n_resnet_blocks: None,
            dropout_rate: None,
            use_gated_output: None,
            epochs: None,
            sub_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Examples used to train the family members.
    pub n_train: usize,
    /// Examples the family predicts on; ensembles are fitted and evaluated here.
    pub n_examples: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames per clip.
    pub n_frames: (usize, usize),
    /// Zipf exponent of the class-selection weights.
    pub skew: f64,
    /// Probability that a generating class is reported as a random other class.
    pub label_noise: f64,
    /// Standard deviation of the per-frame Gaussian noise.
    pub frame_noise: f64,
    pub family: Vec<PredictorSpec>,
    pub member_arch: MemberArch,
    pub member_train: NetHyperParams,
    /// The family is accepted once every pairwise correlation is below this.
    pub max_correlation: f64,
    pub max_attempts: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_examples: 2000,
            n_classes: 50,
            feature_dim: 32,
            n_frames: (4, 12),
            skew: 1.0,
            label_noise: 0.0,
            frame_noise: 1.0,
            family: Vec::new(),
            member_arch: MemberArch::default(),
            member_train: NetHyperParams {
                epochs: 10,
                output_bias_from_prior: true,
                log_gap: false,
                ..NetHyperParams::default()
            },
            max_correlation: 0.98,
            max_attempts: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_train == 0 || self.n_examples == 0 || self.n_classes == 0 || self.feature_dim == 0 {
            return bad("synthetic counts must be positive".into());
        }
        if self.n_frames.0 == 0 || self.n_frames.0 > self.n_frames.1 {
            return bad(format!("invalid frame range {:?}", self.n_frames));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return bad("skew exponent must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad("label noise must lie in [0, 1)".into());
        }
        if !(self.frame_noise >= 0.0 && self.frame_noise.is_finite()) {
            return bad("frame noise must be non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("at least one attempt is required".into());
        }
        for m in &self.family {
            if !(m.feature_fraction > 0.0 && m.feature_fraction <= 1.0) {
                return bad(format!("member {}: feature fraction must lie in (0, 1]", m.name));
            }
            if !(0.0..1.0).contains(&m.label_noise) {
                return bad(format!("member {}: label noise must lie in [0, 1)", m.name));
            }
        }
        let mut names: Vec<&str> = self.family.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("family member names must be unique".into());
        }
        Ok(())
    }
}

/// Frames and labels of one part of the synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPart {
    pub frames: Vec<Array2<f64>>,
    pub labels: LabelSet,
}

impl SynthPart {
    /// Aggregated mean/std features over the listed frame dimensions.
    pub fn features(&self, dims: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.frames.len(), 2 * dims.len()));
        for (i, f) in self.frames.iter().enumerate() {
            let phi = aggregate_mean_std(f.select(Axis(1), dims).view())?.concat();
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&phi));
        }
        Ok(out)
    }

    pub fn all_features(&self) -> Result<Array2<f64>> {
        let dims: Vec<usize> = (0..self.frames.first().map_or(0, |f| f.ncols())).collect();
        self.features(&dims)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: SynthPart,
    pub eval: SynthPart,
    /// Unit-norm prototype of each class, one row per class.
    pub prototypes: Array2<f64>,
}

/// Draws from the (unnormalised) cumulative weights.
fn draw(cumulative: &[f64], rng: &mut SeededRng) -> usize {
    let total = *cumulative.last().expect("non-empty");
    let u = rng.uniform() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

struct ClassSampler {
    /// Cumulative Zipf weights over ranks.
    cumulative: Vec<f64>,
    /// Class holding each rank.
    rank_class: Vec<usize>,
}

impl ClassSampler {
    fn new(n_classes: usize, skew: f64, rng: &mut SeededRng) -> Self {
        let mut rank_class: Vec<usize> = (0..n_classes).collect();
        rng.shuffle(&mut rank_class);
        let mut acc = 0.0;
        let cumulative = (1..=n_classes)
            .map(|r| {
                acc += (r as f64).powf(-skew);
                acc
            })
            .collect();
        Self { cumulative, rank_class }
    }

    fn sample(&self, rng: &mut SeededRng) -> usize {
        self.rank_class[draw(&self.cumulative, rng)]
    }

    /// `k` distinct classes, drawn one at a time and redrawn on repeats.
    fn sample_distinct(&self, k: usize, rng: &mut SeededRng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(k);
        while out.len() < k {
            let c = self.sample(rng);
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }
}

fn gen_example(spec: &SynthSpec, sampler: &ClassSampler, protos: &Array2<f64>, index: u64) -> (Array2<f64>, Vec<u32>) {
    let mut rng = SeededRng::derive(spec.seed, stream::SYNTH_DATA, 1 + index);
    let mut acc = 0.0;
    let cum: Vec<f64> = LABEL_COUNT_PROBS
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    let k = (draw(&cum, &mut rng) + 1).min(spec.n_classes);
    let classes = sampler.sample_distinct(k, &mut rng);
    let (lo, hi) = spec.n_frames;
    let t = lo + rng.below(hi - lo + 1);
    let f = spec.feature_dim;
    let mut frames = Array2::zeros((t, f));
    for mut row in frames.rows_mut() {
        for &c in &classes {
            let amp = rng.uniform_in(0.5, 1.5);
            row.scaled_add(amp, &protos.row(c));
        }
        for v in row.iter_mut() {
            *v += spec.frame_noise * rng.normal();
        }
    }
    let mut labels: Vec<u32> = classes
        .iter()
        .map(|&c| {
            if spec.label_noise > 0.0 && rng.bernoulli(spec.label_noise) {
                sampler.sample(&mut rng) as u32
            } else {
                c as u32
            }
        })
        .collect();
    labels.sort_unstable();
    labels.dedup();
    (frames, labels)
}

fn gen_part(spec: &SynthSpec, sampler: &ClassSampler, protos: &Array2<f64>, offset: usize, n: usize, prefix: &str) -> Result<SynthPart> {
    let (frames, positives): (Vec<_>, Vec<_>) = (0..n)
        .into_par_iter()
        .map(|i| gen_example(spec, sampler, protos, (offset + i) as u64))
        .unzip();
    let ids = (0..n).map(|i| format!("{prefix}{i:06}")).collect();
    Ok(SynthPart {
        frames,
        labels: LabelSet::new(ids, spec.n_classes, positives)?,
    })
}

/// Generates the training and evaluation clips. Each clip mixes one to four
/// class prototypes, chosen with Zipf-skewed weights, over a random number
/// of noisy frames.
pub fn gen_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = SeededRng::derive(spec.seed, stream::SYNTH_DATA, 0);
    let mut protos = Array2::from_shape_simple_fn((spec.n_classes, spec.feature_dim), || rng.normal());
    for mut row in protos.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let sampler = ClassSampler::new(spec.n_classes, spec.skew, &mut rng);
    let train = gen_part(spec, &sampler, &protos, 0, spec.n_train, "tr")?;
    let eval = gen_part(spec, &sampler, &protos, spec.n_train, spec.n_examples, "ev")?;
    Ok(SynthDataset {
        train,
        eval,
        prototypes: protos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub name: String,
    pub seed: u64,
    /// Number of times the member was regenerated.
    pub regenerations: usize,
    pub feature_dims: Vec<usize>,
    pub config: ToyNetConfig,
    pub final_train_loss: f64,
    pub eval_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub members: Vec<MemberReport>,
    pub correlation: Vec<Vec<Option<f64>>>,
    pub max_correlation: f64,
    pub rounds: usize,
}

pub struct Family {
    pub predictions: Vec<PredictionSet>,
    pub report: FamilyReport,
}

fn member_seed(spec: &SynthSpec, index: usize, attempt: usize) -> u64 {
    let base = spec.family[index]
        .sub_seed
        .unwrap_or_else(|| sub_seed(spec.seed, stream::SYNTH_MEMBER, index as u64));
    if attempt == 0 {
        base
    } else {
        sub_seed(base, stream::SYNTH_ATTEMPT, attempt as u64)
    }
}

fn noisy_labels(y: &LabelSet, noise: f64, rng: &mut SeededRng) -> Result<LabelSet> {
    if noise == 0.0 {
        return Ok(y.clone());
    }
    let c = y.n_classes();
    let positives = (0..y.n_examples())
        .map(|i| {
            let mut p: Vec<u32> = y.positives(i).iter().copied().filter(|_| !rng.bernoulli(noise)).collect();
            if rng.bernoulli(noise) {
                p.push(rng.below(c) as u32);
            }
            p
        })
        .collect();
    LabelSet::new(y.example_ids().to_vec(), c, positives)
}

fn train_member(spec: &SynthSpec, data: &SynthDataset, index: usize, attempt: usize) -> Result<(PredictionSet, MemberReport)> {
    let m = &spec.family[index];
    let seed = member_seed(spec, index, attempt);
    let mut rng = SeededRng::new(seed);
    let f = spec.feature_dim;
    let keep = ((m.feature_fraction * f as f64).round() as usize).clamp(1, f);
    let mut dims: Vec<usize> = (0..f).collect();
    rng.shuffle(&mut dims);
    dims.truncate(keep);
    dims.sort_unstable();

    let arch = &spec.member_arch;
    let cfg = ToyNetConfig {
        input_dim: 2 * keep,
        hidden_dims: m.hidden_dims.clone().unwrap_or_else(|| arch.hidden_dims.clone()),
        n_resnet_blocks: m.n_resnet_blocks.unwrap_or(arch.n_resnet_blocks),
        dropout_rate: m.dropout_rate.unwrap_or(arch.dropout_rate),
        n_classes: spec.n_classes,
        use_gated_output: m.use_gated_output.unwrap_or(arch.use_gated_output),
        gate_bias: true,
        seed: rng.next_u64(),
    };
    let mut hp = spec.member_train.clone();
    if let Some(e) = m.epochs {
        hp.epochs = e;
    }
    let train = Dataset::new(
        data.train.features(&dims)?,
        noisy_labels(&data.train.labels, m.label_noise, &mut rng)?,
    )?;
    let (params, log) = fcrn_train(&cfg, &train, None, &hp, rng.next_u64())?;
    let eval_x = data.eval.features(&dims)?;
    let preds = predict(&params, eval_x.view(), data.eval.labels.example_ids().to_vec(), &m.name)?;
    let eval_gap = gap_at_k(&preds, &data.eval.labels, hp.gap_k)?;
    let report = MemberReport {
        name: m.name.clone(),
        seed,
        regenerations: attempt,
        feature_dims: dims,
        config: cfg,
        final_train_loss: log.epochs.last().map_or(f64::NAN, |e| e.loss),
        eval_gap,
    };
    Ok((preds, report))
}

fn correlations(preds: &[PredictionSet]) -> Vec<Vec<Option<f64>>> {
    let raw: Vec<Vec<f64>> = preds.iter().map(|p| p.scores().iter().map(|&s| f64::from(s)).collect()).collect();
    let d = preds.len();
    let mut out = vec![vec![None; d]; d];
    for i in 0..d {
        for j in i..d {
            let r = pearson_slices(&raw[i], &raw[j]);
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    out
}

/// Most correlated pair, treating undefined correlations (constant
/// predictors) as perfectly correlated.
fn worst_pair(corr: &[Vec<Option<f64>>]) -> Option<(usize, usize, f64)> {
    let mut worst: Option<(usize, usize, f64)> = None;
    for i in 0..corr.len() {
        for j in i + 1..corr.len() {
            let r = corr[i][j].unwrap_or(1.0);
            if worst.is_none_or(|w| r > w.2) {
                worst = Some((i, j, r));
            }
        }
    }
    worst
}

/// Trains every family member on the training part and predicts the
/// evaluation part. While some pair is correlated at or above
/// `spec.max_correlation`, the later member of the worst pair is retrained
/// with a fresh seed, for at most `spec.max_attempts` rounds.
pub fn gen_predictor_family(spec: &SynthSpec, data: &SynthDataset) -> Result<Family> {
    spec.validate()?;
    if spec.family.is_empty() {
        return Err(Error::InvalidArgument("the predictor family is empty".into()));
    }
    let mut attempts = vec![0usize; spec.family.len()];
    let trained: Vec<(PredictionSet, MemberReport)> = (0..spec.family.len())
        .into_par_iter()
        .map(|i| train_member(spec, data, i, 0))
        .collect::<Result<_>>()?;
    let (mut preds, mut members): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let mut rounds = 0;
    loop {
        let corr = correlations(&preds);
        let worst = worst_pair(&corr);
        let max_correlation = worst.map_or(f64::NEG_INFINITY, |w| w.2);
        match worst {
            Some((_, j, r)) if r >= spec.max_correlation => {
                if rounds == spec.max_attempts {
                    return Err(Error::DiversityUnattainable {
                        attempts: rounds,
                        max_correlation: r,
                    });
                }
                rounds += 1;
                attempts[j] += 1;
                let (p, m) = train_member(spec, data, j, attempts[j])?;
                preds[j] = p;
                members[j] = m;
            }
            _ => {
                return Ok(Family {
                    predictions: preds,
                    report: FamilyReport {
                        members,
                        correlation: corr,
                        max_correlation,
                        rounds,
                    },
                })
            }
        }
    }
}
