//! Head-level metrics: separation accuracy (linear SVM on head outputs),
//! learned accuracy (ablation), ROC AUC of partial logits, subset sweeps,
//! head weights and the exports built on them.

pub mod stats;
pub mod svm;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountTriple, Sample, Token, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::interventions::HeadRatios;
use crate::model::{CountEngine, ModelParams, QueryToken};
use crate::numerics::{argmax, dot, Matrix};

pub use stats::{pearson, roc_auc, summarize, Summary};
pub use svm::{fit_linear_svm, svm_objective, SvmModel, DEFAULT_C};

/// A set of heads as a bitmask (head `i` ↔ bit `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadSet(pub u64);

impl HeadSet {
    pub const EMPTY: HeadSet = HeadSet(0);

    pub fn full(heads: usize) -> Self {
        assert!(heads <= 64);
        HeadSet(if heads == 64 { u64::MAX } else { (1u64 << heads) - 1 })
    }

    pub fn single(head: usize) -> Self {
        HeadSet(1u64 << head)
    }

    pub fn from_heads(heads: &[usize]) -> Self {
        HeadSet(heads.iter().fold(0, |m, &h| m | (1u64 << h)))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, head: usize) -> bool {
        self.0 >> head & 1 == 1
    }

    pub fn heads(self) -> Vec<usize> {
        (0..64).filter(|&h| self.contains(h)).collect()
    }

    pub fn key(self) -> String {
        format!("{:#x}", self.0)
    }
}

/// Cached quantities at one query position for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionFeatures {
    pub query: Vec<Token>,
    /// Concatenated head outputs, `samples × (heads · head_dim)`.
    pub outputs: Matrix,
    /// `z_{t,h}`, row-major by sample then head.
    pub contributions: Vec<[f64; VOCAB_SIZE]>,
    /// Output bias plus the skip term; the logits of the fully ablated model.
    pub base: Vec<[f64; VOCAB_SIZE]>,
    /// The token the model should emit here.
    pub target: Vec<Token>,
}

impl PositionFeatures {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    fn contribution(&self, heads: usize, row: usize, head: usize) -> &[f64; VOCAB_SIZE] {
        &self.contributions[row * heads + head]
    }

    fn logits(&self, heads: usize, row: usize, set: HeadSet) -> [f64; VOCAB_SIZE] {
        let mut z = self.base[row];
        for h in set.heads() {
            if h >= heads {
                break;
            }
            let c = self.contribution(heads, row, h);
            for t in 0..VOCAB_SIZE {
                z[t] += c[t];
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeatures {
    pub heads: usize,
    pub head_dim: usize,
    pub counts: Vec<CountTriple>,
    pub answers: Vec<Token>,
    /// ±1, `+1` for answer '4'.
    pub labels: Vec<f64>,
    pub eq: PositionFeatures,
    pub answer: Option<PositionFeatures>,
}

fn position_features(engine: &CountEngine<'_>, samples: &[Sample], at_answer: bool) -> PositionFeatures {
    let (a, d0) = (engine.heads(), engine.head_dim());
    let mut outputs = Matrix::zeros(samples.len(), a * d0);
    let mut contributions = Vec::with_capacity(samples.len() * a);
    let mut base = Vec::with_capacity(samples.len());
    let mut query = Vec::with_capacity(samples.len());
    let mut target = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let q = if at_answer { QueryToken::answer(s.answer) } else { QueryToken::Eq };
        let f = engine.forward(s.counts, q);
        outputs.row_mut(i).copy_from_slice(&f.head_outputs);
        base.push(engine.base_logits(q.token().id()));
        contributions.extend_from_slice(&f.contributions);
        query.push(q.token());
        target.push(if at_answer { Token::Eos } else { s.answer });
    }
    PositionFeatures {
        query,
        outputs,
        contributions,
        base,
        target,
    }
}

/// One row per sample from the count-collapsed forward pass; answer-position
/// rows are added when `with_answer` is set.
pub fn collect_features(engine: &CountEngine<'_>, samples: &[Sample], with_answer: bool) -> HeadFeatures {
    HeadFeatures {
        heads: engine.heads(),
        head_dim: engine.head_dim(),
        counts: samples.iter().map(|s| s.counts).collect(),
        answers: samples.iter().map(|s| s.answer).collect(),
        labels: samples.iter().map(|s| if s.answer == Token::Four { 1.0 } else { -1.0 }).collect(),
        eq: position_features(engine, samples, false),
        answer: with_answer.then(|| position_features(engine, samples, true)),
    }
}

impl HeadFeatures {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Concatenated '=' outputs of `heads`, in the given order.
    pub fn design(&self, heads: &[usize]) -> Matrix {
        let d0 = self.head_dim;
        Matrix::from_fn(self.len(), heads.len() * d0, |r, c| {
            self.eq.outputs.get(r, heads[c / d0] * d0 + c % d0)
        })
    }

    /// Largest deviation of cached `z_{t,h}` from `O_hᵀ w_{h,t}`.
    pub fn contribution_error(&self, params: &ModelParams) -> f64 {
        let d0 = self.head_dim;
        let mut worst: f64 = 0.0;
        for pos in std::iter::once(&self.eq).chain(self.answer.as_ref()) {
            for r in 0..pos.len() {
                for h in 0..self.heads {
                    let o = &pos.outputs.row(r)[h * d0..(h + 1) * d0];
                    let c = pos.contribution(self.heads, r, h);
                    for (t, &ct) in c.iter().enumerate() {
                        worst = worst.max((dot(o, &params.head_out_weight(h, t)) - ct).abs());
                    }
                }
            }
        }
        worst
    }
}

/// s-acc with head outputs concatenated in the given order.
pub fn s_acc_ordered(heads: &[usize], train: &HeadFeatures, test: &HeadFeatures) -> Result<f64> {
    if heads.is_empty() {
        return Err(Error::Config("s-acc needs a nonempty head set".into()));
    }
    let model = fit_linear_svm(&train.design(heads), &train.labels, DEFAULT_C)?;
    Ok(model.accuracy(&test.design(heads), &test.labels))
}

/// Separation accuracy: a linear SVM on the heads' '=' outputs, fitted on
/// `train` and scored on `test`.
pub fn s_acc(set: HeadSet, train: &HeadFeatures, test: &HeadFeatures) -> Result<f64> {
    s_acc_ordered(&set.heads(), train, test)
}

fn position_l_acc(pos: &PositionFeatures, heads: usize, set: HeadSet) -> f64 {
    if pos.is_empty() {
        return 1.0;
    }
    let hits = (0..pos.len())
        .filter(|&r| argmax(&pos.logits(heads, r, set)) == pos.target[r].id())
        .count();
    hits as f64 / pos.len() as f64
}

/// Main-task accuracy at '=' with every head outside `set` zeroed.
pub fn l_acc(set: HeadSet, features: &HeadFeatures) -> f64 {
    position_l_acc(&features.eq, features.heads, set)
}

/// [EOS] accuracy at the answer position with every head outside `set` zeroed.
pub fn l_acc_syntactic(set: HeadSet, features: &HeadFeatures) -> Result<f64> {
    let pos = features
        .answer
        .as_ref()
        .ok_or_else(|| Error::Config("features were collected without answer positions".into()))?;
    Ok(position_l_acc(pos, features.heads, set))
}

fn auc_from_logits(logits: &[[f64; VOCAB_SIZE]], answers: &[Token]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for t in [Token::Four, Token::Five] {
        let scores: Vec<f64> = logits.iter().map(|z| z[t.id()]).collect();
        let labels: Vec<bool> = answers.iter().map(|&a| a == t).collect();
        best = best.max(roc_auc(&scores, &labels)?);
    }
    Ok(best)
}

/// Max over t ∈ {'4','5'} of the AUC of `z_{t,H}` at '=' for "next token is t".
pub fn roc_auc_metric(set: HeadSet, features: &HeadFeatures) -> Result<f64> {
    let logits: Vec<_> = (0..features.len())
        .map(|r| features.eq.logits(features.heads, r, set))
        .collect();
    auc_from_logits(&logits, &features.answers)
}

/// `hw_i = ‖w_{i,5} − w_{i,4}‖ / Σ_j ‖w_{j,5} − w_{j,4}‖`.
pub fn head_weights(params: &ModelParams) -> Result<Vec<f64>> {
    let norms: Vec<f64> = (0..params.heads())
        .map(|h| {
            let w4 = params.head_out_weight(h, Token::Four.id());
            let w5 = params.head_out_weight(h, Token::Five.id());
            w5.iter().zip(&w4).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("all '5' − '4' output weight differences are zero".into()));
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

/// `Σ_i hw_i · s-acc({i})`.
pub fn weighted_s_acc(hw: &[f64], singleton_s_acc: &[f64]) -> f64 {
    hw.iter().zip(singleton_s_acc).map(|(w, s)| w * s).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub seed: u64,
    pub epoch: usize,
    pub weighted_s_acc: f64,
    pub model_accuracy: f64,
}

/// Pearson r between weighted s-acc and model accuracy over checkpoints.
pub fn weighted_sacc_correlation(points: &[CorrelationPoint]) -> Result<f64> {
    let x: Vec<f64> = points.iter().map(|p| p.weighted_s_acc).collect();
    let y: Vec<f64> = points.iter().map(|p| p.model_accuracy).collect();
    pearson(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub mask: u64,
    pub size: usize,
    pub l_acc: f64,
    pub l_acc_syntactic: Option<f64>,
    pub roc_auc: Option<f64>,
    pub s_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Fit s-acc on every subset up to this size.
    pub exhaustive_up_to: usize,
    /// Subsets sampled per larger size.
    pub budget_per_size: usize,
    /// Largest subset size that gets s-acc at all.
    pub max_sacc_size: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            exhaustive_up_to: 2,
            budget_per_size: 200,
            max_sacc_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub size: usize,
    pub metric: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    pub std: f64,
}

impl SizeSummary {
    fn new(size: usize, metric: &str, s: Summary) -> Self {
        SizeSummary {
            size,
            metric: metric.to_string(),
            count: s.count,
            min: s.min,
            q1: s.q1,
            median: s.median,
            mean: s.mean,
            q3: s.q3,
            max: s.max,
            std: s.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSweep {
    pub heads: usize,
    pub subsets: Vec<SubsetMetrics>,
    pub summaries: Vec<SizeSummary>,
}

pub const MAX_SWEEP_HEADS: usize = 24;

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn sacc_masks(heads: usize, opts: &SweepOptions) -> Vec<HeadSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for k in 1..=heads.min(opts.max_sacc_size) {
        if k <= opts.exhaustive_up_to || binomial(heads, k) <= opts.budget_per_size as u128 {
            out.extend((1u64..1 << heads).filter(|m| m.count_ones() as usize == k).map(HeadSet));
            continue;
        }
        let mut chosen = BTreeSet::new();
        let mut attempts = 0;
        while chosen.len() < opts.budget_per_size && attempts < 50 * opts.budget_per_size {
            let pick = rand::seq::index::sample(&mut rng, heads, k);
            chosen.insert(HeadSet::from_heads(&pick.into_vec()));
            attempts += 1;
        }
        out.extend(chosen);
    }
    out
}

/// l-acc and ROC AUC on every nonempty subset (Gray-code walk over cached
/// contributions), s-acc on all small subsets and a sample of larger ones.
pub fn subset_sweep(train: &HeadFeatures, test: &HeadFeatures, opts: &SweepOptions) -> Result<SubsetSweep> {
    let a = test.heads;
    if a == 0 || a > MAX_SWEEP_HEADS {
        return Err(Error::Config(format!("subset sweep supports 1..={MAX_SWEEP_HEADS} heads, got {a}")));
    }
    let n = test.len();
    let mut eq_z: Vec<[f64; VOCAB_SIZE]> = test.eq.base.clone();
    let mut ans_z: Option<Vec<[f64; VOCAB_SIZE]>> = test.answer.as_ref().map(|p| p.base.clone());
    let both_classes = test.answers.iter().any(|&t| t == Token::Four) && test.answers.iter().any(|&t| t == Token::Five);

    let mut subsets = Vec::with_capacity((1usize << a) - 1);
    let mut current = 0u64;
    for i in 1u64..1 << a {
        let flip = i.trailing_zeros() as usize;
        let adding = current >> flip & 1 == 0;
        current ^= 1 << flip;
        let sign = if adding { 1.0 } else { -1.0 };
        for r in 0..n {
            let c = test.eq.contribution(a, r, flip);
            for t in 0..VOCAB_SIZE {
                eq_z[r][t] += sign * c[t];
            }
        }
        if let (Some(z), Some(pos)) = (ans_z.as_mut(), test.answer.as_ref()) {
            for (r, zr) in z.iter_mut().enumerate() {
                let c = pos.contribution(a, r, flip);
                for t in 0..VOCAB_SIZE {
                    zr[t] += sign * c[t];
                }
            }
        }
        let hits = |z: &[[f64; VOCAB_SIZE]], target: &[Token]| {
            z.iter().zip(target).filter(|(zr, t)| argmax(&zr[..]) == t.id()).count() as f64 / n.max(1) as f64
        };
        let l_acc = hits(&eq_z, &test.eq.target);
        let l_acc_syntactic = match (&ans_z, &test.answer) {
            (Some(z), Some(pos)) => Some(hits(z, &pos.target)),
            _ => None,
        };
        let roc = if both_classes { Some(auc_from_logits(&eq_z, &test.answers)?) } else { None };
        subsets.push(SubsetMetrics {
            mask: current,
            size: current.count_ones() as usize,
            l_acc,
            l_acc_syntactic,
            roc_auc: roc,
            s_acc: None,
        });
    }
    subsets.sort_by_key(|s| s.mask);

    for set in sacc_masks(a, opts) {
        let acc = s_acc(set, train, test)?;
        subsets[set.0 as usize - 1].s_acc = Some(acc);
    }

    let mut summaries = Vec::new();
    for k in 1..=a {
        let of_size: Vec<&SubsetMetrics> = subsets.iter().filter(|s| s.size == k).collect();
        let metrics: [(&str, Vec<f64>); 4] = [
            ("s_acc", of_size.iter().filter_map(|s| s.s_acc).collect()),
            ("l_acc", of_size.iter().map(|s| s.l_acc).collect()),
            ("l_acc_syntactic", of_size.iter().filter_map(|s| s.l_acc_syntactic).collect()),
            ("roc_auc", of_size.iter().filter_map(|s| s.roc_auc).collect()),
        ];
        for (name, values) in metrics {
            if let Some(summary) = summarize(&values) {
                summaries.push(SizeSummary::new(k, name, summary));
            }
        }
    }
    Ok(SubsetSweep {
        heads: a,
        subsets,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint: Option<String>,
    pub seed: Option<u64>,
    pub heads: usize,
    pub head_weights: Vec<f64>,
    pub ratios: Vec<HeadRatios>,
    /// Keyed by the subset bitmask in hex.
    pub subsets: BTreeMap<String, SubsetMetrics>,
}

impl ProbeReport {
    pub fn new(
        checkpoint: Option<String>,
        seed: Option<u64>,
        params: &ModelParams,
        ratios: Vec<HeadRatios>,
        subsets: &[SubsetMetrics],
    ) -> Result<Self> {
        Ok(ProbeReport {
            checkpoint,
            seed,
            heads: params.heads(),
            head_weights: head_weights(params)?,
            ratios,
            subsets: subsets.iter().map(|s| (HeadSet(s.mask).key(), *s)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub head: usize,
    pub current: String,
    pub next: String,
    pub z4: f64,
    pub z5: f64,
    pub z_eos: f64,
}

/// Per-head contributions to the '4', '5' and [EOS] logits at both supervised
/// positions, labelled by current and true next token.
pub fn logit_distribution_export(features: &HeadFeatures) -> Result<Vec<LogitRow>> {
    let ans = features
        .answer
        .as_ref()
        .ok_or_else(|| Error::Config("logit export needs answer-position features".into()))?;
    let a = features.heads;
    let mut rows = Vec::with_capacity(features.len() * a * 2);
    for r in 0..features.len() {
        for pos in [&features.eq, ans] {
            for h in 0..a {
                let c = pos.contribution(a, r, h);
                rows.push(LogitRow {
                    head: h,
                    current: pos.query[r].symbol().to_string(),
                    next: pos.target[r].symbol().to_string(),
                    z4: c[Token::Four.id()],
                    z5: c[Token::Five.id()],
                    z_eos: c[Token::Eos.id()],
                });
            }
        }
    }
    Ok(rows)
}

/// One row of a 2-D head scatter: a sample point, a value vector, or the separator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub head: usize,
    /// `point`, `value` or `separator`.
    pub kind: String,
    /// Answer symbol for points, token symbol for values, empty for the separator.
    pub label: String,
    pub x: f64,
    pub y: f64,
    /// Separator bias (`w·(x, y) + c = 0`); zero otherwise.
    pub c: f64,
}

/// Test-set head outputs, the '0'/'1'/'2' value vectors and the fitted
/// separator line for every head. Requires `head_dim = 2`.
pub fn head_scatter_export(engine: &CountEngine<'_>, train: &HeadFeatures, test: &HeadFeatures) -> Result<Vec<ScatterRow>> {
    if test.head_dim != 2 {
        return Err(Error::Config(format!("head scatter needs head_dim 2, got {}", test.head_dim)));
    }
    let mut rows = Vec::new();
    for h in 0..test.heads {
        for r in 0..test.len() {
            let o = &test.eq.outputs.row(r)[2 * h..2 * h + 2];
            rows.push(ScatterRow {
                head: h,
                kind: "point".into(),
                label: test.answers[r].symbol().into(),
                x: o[0],
                y: o[1],
                c: 0.0,
            });
        }
        for t in [Token::Zero, Token::One, Token::Two] {
            let v = engine.value(h, t.id());
            rows.push(ScatterRow {
                head: h,
                kind: "value".into(),
                label: t.symbol().into(),
                x: v[0],
                y: v[1],
                c: 0.0,
            });
        }
        let svm = fit_linear_svm(&train.design(&[h]), &train.labels, DEFAULT_C)?;
        rows.push(ScatterRow {
            head: h,
            kind: "separator".into(),
            label: String::new(),
            x: svm.weights[0],
            y: svm.weights[1],
            c: svm.bias,
        });
    }
    Ok(rows)
}
