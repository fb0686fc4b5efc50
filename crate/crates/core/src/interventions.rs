//! Attention-weight ratios at the '=' query and synthetic attention rows.
//!
//! Without positional information a head's attention at '=' factorises over
//! token types, so the weight ratio between two types is the exponential of
//! their logit difference whatever the sentence. Interventions replace the
//! '=' attention row by one that only sees '0', '1' and '2' with prescribed
//! ratios, leaving value vectors untouched.

use serde::{Deserialize, Serialize};

use crate::data::{CountTriple, Sample, Token};
use crate::error::{Error, Result};
use crate::model::CountEngine;
use crate::probes::{fit_linear_svm, summarize, HeadFeatures, HeadSet, DEFAULT_C};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadRatios {
    pub head: usize,
    pub w01: f64,
    pub w02: f64,
}

/// `A_{=,i} / A_{=,j}` for one occurrence of each type.
pub fn attention_ratio(engine: &CountEngine<'_>, head: usize, type_i: Token, type_j: Token) -> f64 {
    let q = Token::Eq.id();
    (engine.attention_logit(head, q, type_i.id()) - engine.attention_logit(head, q, type_j.id())).exp()
}

pub fn attention_ratios(engine: &CountEngine<'_>) -> Vec<HeadRatios> {
    (0..engine.heads())
        .map(|h| HeadRatios {
            head: h,
            w01: attention_ratio(engine, h, Token::Zero, Token::One),
            w02: attention_ratio(engine, h, Token::Zero, Token::Two),
        })
        .collect()
}

/// Unnormalised per-token weights `(u0, u1, u2)` with `u0/u1 = w01`, `u0/u2 = w02`.
/// An infinite `w02` gives `u2 = 0`.
pub fn ratio_weights(w01: f64, w02: f64) -> Result<[f64; 3]> {
    if !(w01 > 0.0 && w01.is_finite()) || !(w02 > 0.0) {
        return Err(Error::Config(format!("ratios must be positive (w01={w01}, w02={w02})")));
    }
    Ok([1.0, 1.0 / w01, if w02.is_infinite() { 0.0 } else { 1.0 / w02 }])
}

/// Head output at '=' under the intervened attention row.
pub fn intervened_head_output(
    engine: &CountEngine<'_>,
    head: usize,
    counts: CountTriple,
    w01: f64,
    w02: f64,
) -> Result<Vec<f64>> {
    let u = ratio_weights(w01, w02)?;
    intervened_with_weights(engine, head, counts, &u)
}

fn intervened_with_weights(engine: &CountEngine<'_>, head: usize, counts: CountTriple, u: &[f64; 3]) -> Result<Vec<f64>> {
    let n = [counts.n0 as f64, counts.n1 as f64, counts.n2 as f64];
    let total: f64 = n.iter().zip(u).map(|(c, w)| c * w).sum();
    if total == 0.0 {
        return Err(Error::EmptyAttention);
    }
    let mut out = vec![0.0; engine.head_dim()];
    for (k, tok) in [Token::Zero, Token::One, Token::Two].into_iter().enumerate() {
        let p = n[k] * u[k] / total;
        if p == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(engine.value(head, tok.id())) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// Intervened '=' outputs of one head for every sample with a defined output.
/// Returns the design matrix, ±1 labels and the number of skipped samples.
pub fn intervened_design(
    engine: &CountEngine<'_>,
    head: usize,
    samples: &[Sample],
    w01: f64,
    w02: f64,
) -> Result<(Matrix, Vec<f64>, usize)> {
    let u = ratio_weights(w01, w02)?;
    let mut data = Vec::with_capacity(samples.len() * engine.head_dim());
    let mut labels = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        match intervened_with_weights(engine, head, s.counts, &u) {
            Ok(o) => {
                data.extend(o);
                labels.push(if s.answer == Token::Four { 1.0 } else { -1.0 });
            }
            Err(Error::EmptyAttention) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((Matrix::from_vec(labels.len(), engine.head_dim(), data)?, labels, skipped))
}

/// s-acc of one head under the intervention.
pub fn intervened_s_acc(
    engine: &CountEngine<'_>,
    head: usize,
    train: &[Sample],
    test: &[Sample],
    w01: f64,
    w02: f64,
) -> Result<f64> {
    let (xtr, ytr, _) = intervened_design(engine, head, train, w01, w02)?;
    let (xte, yte, _) = intervened_design(engine, head, test, w01, w02)?;
    Ok(fit_linear_svm(&xtr, &ytr, DEFAULT_C)?.accuracy(&xte, &yte))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioAxis {
    /// Vary `w01` with '2' ignored.
    W01,
    /// Vary `w02` with '0' and '1' weighted equally.
    W02,
}

impl RatioAxis {
    pub fn name(self) -> &'static str {
        match self {
            RatioAxis::W01 => "w01",
            RatioAxis::W02 => "w02",
        }
    }

    /// The `(w01, w02)` pair at a grid value.
    pub fn ratios(self, value: f64) -> (f64, f64) {
        match self {
            RatioAxis::W01 => (value, f64::INFINITY),
            RatioAxis::W02 => (1.0, value),
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            RatioAxis::W01 => log_grid(1e-3, 1e3, 25),
            RatioAxis::W02 => log_grid(1e-2, 1e4, 25),
        }
    }
}

/// `points` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub ratio: f64,
    /// Head index, or `mean` / `std` for the aggregate rows.
    pub head: String,
    pub s_acc: f64,
}

/// Per-head s-acc along one ratio axis, followed at each grid value by mean and std rows.
pub fn sweep_ratio(
    engine: &CountEngine<'_>,
    axis: RatioAxis,
    grid: &[f64],
    train: &[Sample],
    test: &[Sample],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len() * (engine.heads() + 2));
    for &value in grid {
        let (w01, w02) = axis.ratios(value);
        let mut accs = Vec::with_capacity(engine.heads());
        for h in 0..engine.heads() {
            let acc = intervened_s_acc(engine, h, train, test, w01, w02)?;
            accs.push(acc);
            rows.push(SweepRow {
                axis: axis.name().into(),
                ratio: value,
                head: h.to_string(),
                s_acc: acc,
            });
        }
        let s = summarize(&accs).expect("at least one head");
        for (name, v) in [("mean", s.mean), ("std", s.std)] {
            rows.push(SweepRow {
                axis: axis.name().into(),
                ratio: value,
                head: name.into(),
                s_acc: v,
            });
        }
    }
    Ok(rows)
}

pub const SUCCESS_THRESHOLD: f64 = 0.98;
pub const FAILURE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadClass {
    Successful,
    Mixed,
    Failed,
}

pub fn classify_head(s_acc: f64) -> HeadClass {
    if s_acc >= SUCCESS_THRESHOLD {
        HeadClass::Successful
    } else if s_acc <= FAILURE_THRESHOLD {
        HeadClass::Failed
    } else {
        HeadClass::Mixed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub head: usize,
    pub w01: f64,
    pub w02: f64,
    pub s_acc: f64,
    pub class: HeadClass,
}

/// `(w01, w02, s-acc)` per head from the trained model's own attention.
pub fn ratio_scatter(engine: &CountEngine<'_>, train: &HeadFeatures, test: &HeadFeatures) -> Result<Vec<RatioPoint>> {
    attention_ratios(engine)
        .into_iter()
        .map(|r| {
            let acc = crate::probes::s_acc(HeadSet::single(r.head), train, test)?;
            Ok(RatioPoint {
                head: r.head,
                w01: r.w01,
                w02: r.w02,
                s_acc: acc,
                class: classify_head(acc),
            })
        })
        .collect()
}
