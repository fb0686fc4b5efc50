//! A hand-built single-head, one-dimensional solution and its closed-form behaviour.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::data::{label_for, CountTriple, Sample, Token, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::{CountEngine, ModelConfig, ModelParams, QueryToken};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimalConfig {
    /// Embedding scale `N`.
    pub n: f64,
    /// Bias offset that breaks ties toward '5'.
    pub epsilon: f64,
    /// Route the query embedding straight to the logits.
    pub skip: bool,
}

impl Default for MinimalConfig {
    fn default() -> Self {
        Self {
            n: 15.0,
            epsilon: 1e-3,
            skip: false,
        }
    }
}

impl MinimalConfig {
    pub fn new(n: f64) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n >= 5.0) || !self.n.is_finite() {
            return Err(Error::Config(format!("N must be at least 5, got {}", self.n)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Decision threshold `a = (N + e(N+1)) / (1 + e)`: the head output when `n0 = n1`.
    pub fn threshold(&self) -> f64 {
        (self.n + E * (self.n + 1.0)) / (1.0 + E)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            skip_to_output: self.skip,
            ..ModelConfig::new(1, 1).with_layer_norm(false)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimalModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub threshold: f64,
}

const OUT_WEIGHTS: [(Token, f64); 3] = [(Token::Four, 1.0), (Token::Five, -1.0), (Token::Eos, 4.0)];

pub fn build_minimal(cfg: &MinimalConfig) -> Result<MinimalModel> {
    cfg.validate()?;
    let n = cfg.n;
    let a = cfg.threshold();
    let config = cfg.model_config();
    let mut params = ModelParams::zeros(&config);

    let embed = [0.0, n, n + 1.0, 0.0, 1.0, n * n, n * n, 0.0];
    for (t, v) in embed.into_iter().enumerate() {
        params.embed.set(t, 0, v);
    }
    params.key[0].set(0, 0, 1.0);
    params.query[0].set(0, 0, 1.0);
    params.value[0].set(0, 0, 1.0);

    for (tok, w) in OUT_WEIGHTS {
        params.out_w.set(0, tok.id(), w);
    }
    // Without the skip path the '=' embedding (1) no longer reaches the logits,
    // so the answer biases drop the matching unit.
    let shift = if cfg.skip { 1.0 } else { 0.0 };
    params.out_b.set(0, Token::Four.id(), -a - shift);
    params.out_b.set(0, Token::Five.id(), a + shift + cfg.epsilon);
    params.out_b.set(0, Token::Eos.id(), -12.0 * (n + 1.0));
    if let Some(u) = params.unembed.as_mut() {
        for (tok, w) in OUT_WEIGHTS {
            u.set(0, tok.id(), w);
        }
    }
    Ok(MinimalModel {
        config,
        params,
        threshold: a,
    })
}

/// Approximate head output at '=' ignoring [BOS], '=' and '2' (all far below the '0'/'1' logits).
pub fn closed_form_output(counts: CountTriple, cfg: &MinimalConfig) -> Result<f64> {
    let (n0, n1) = (counts.n0 as f64, counts.n1 as f64);
    if n0 + n1 == 0.0 {
        return Err(Error::OutsideValidity);
    }
    Ok((n0 * cfg.n + n1 * E * (cfg.n + 1.0)) / (n0 + n1 * E))
}

/// `y − a` in the exact algebraic form `e(n1 − n0) / ((1+e)(n0 + n1 e))`.
pub fn closed_form_margin(counts: CountTriple) -> Result<f64> {
    let (n0, n1) = (counts.n0 as f64, counts.n1 as f64);
    if n0 + n1 == 0.0 {
        return Err(Error::OutsideValidity);
    }
    Ok(E * (n1 - n0) / ((1.0 + E) * (n0 + n1 * E)))
}

pub fn predict_closed_form(counts: CountTriple, cfg: &MinimalConfig, query: QueryToken) -> Result<Token> {
    match query {
        QueryToken::Eq => Ok(if closed_form_margin(counts)? > 0.0 {
            Token::Four
        } else {
            Token::Five
        }),
        QueryToken::Four | QueryToken::Five => {
            // The answer token dominates attention, so y ≈ N².
            let y = cfg.n * cfg.n;
            let a = cfg.threshold();
            let skip = if cfg.skip { y } else { 0.0 };
            let shift = if cfg.skip { 1.0 } else { 0.0 };
            let z4 = y + skip - a - shift;
            let z5 = -y - skip + a + shift + cfg.epsilon;
            let zeos = 4.0 * (y + skip) - 12.0 * (cfg.n + 1.0);
            Ok(if zeos > z4.max(z5) {
                Token::Eos
            } else if z4 > z5 {
                Token::Four
            } else {
                Token::Five
            })
        }
    }
}

fn argmax(z: &[f64; VOCAB_SIZE]) -> Token {
    Token::from_id(crate::numerics::argmax(z)).expect("vocab id")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub counts: CountTriple,
    pub query: String,
    pub predicted: String,
    pub expected: String,
}

/// Smallest `n2` at which the network starts to answer wrongly for fixed `(n0, n1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub n0: u32,
    pub n1: u32,
    pub first_failing_n2: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalReport {
    pub config: MinimalConfig,
    pub threshold: f64,
    pub samples_in_region: usize,
    pub samples_excluded: usize,
    pub main_accuracy: f64,
    pub syntactic_accuracy: f64,
    pub joint_accuracy: f64,
    pub grid_max: u32,
    pub grid_points: usize,
    pub closed_form_agreement: f64,
    pub failures: Vec<FailureCase>,
    pub failure_boundary: Vec<BoundaryPoint>,
}

const MAX_LISTED_FAILURES: usize = 50;

/// Checks the construction on `samples` (labels from direct count comparison)
/// and against the closed form on the `[0, grid_max]²` grid with no '2's.
pub fn verify_minimal(cfg: &MinimalConfig, samples: &[Sample], grid_max: u32) -> Result<MinimalReport> {
    let model = build_minimal(cfg)?;
    let engine = CountEngine::new(&model.config, &model.params)?;
    let mut failures = Vec::new();
    let mut record = |counts, query: QueryToken, predicted: Token, expected: Token| {
        if failures.len() < MAX_LISTED_FAILURES {
            failures.push(FailureCase {
                counts,
                query: query.token().symbol().to_string(),
                predicted: predicted.symbol().to_string(),
                expected: expected.symbol().to_string(),
            });
        }
    };

    let (mut inside, mut excluded, mut main_ok, mut syn_ok, mut joint_ok) = (0, 0, 0, 0, 0);
    for s in samples {
        if s.counts.n0 + s.counts.n1 == 0 {
            excluded += 1;
            continue;
        }
        inside += 1;
        let expected = label_for(s.counts);
        let main = argmax(&engine.forward(s.counts, QueryToken::Eq).logits);
        let syn = argmax(&engine.forward(s.counts, QueryToken::answer(expected)).logits);
        main_ok += (main == expected) as usize;
        syn_ok += (syn == Token::Eos) as usize;
        joint_ok += (main == expected && syn == Token::Eos) as usize;
        if main != expected {
            record(s.counts, QueryToken::Eq, main, expected);
        }
        if syn != Token::Eos {
            record(s.counts, QueryToken::answer(expected), syn, Token::Eos);
        }
    }

    let (mut grid_points, mut agree) = (0, 0);
    for n0 in 0..=grid_max {
        for n1 in 0..=grid_max {
            if n0 + n1 == 0 {
                continue;
            }
            let counts = CountTriple::new(n0, n1, 0);
            for query in [QueryToken::Eq, QueryToken::Four, QueryToken::Five] {
                grid_points += 1;
                let net = argmax(&engine.forward(counts, query).logits);
                let closed = predict_closed_form(counts, cfg, query)?;
                if net == closed {
                    agree += 1;
                } else {
                    record(counts, query, net, closed);
                }
            }
        }
    }

    let failure_boundary = boundary_pairs()
        .into_iter()
        .map(|(n0, n1)| BoundaryPoint {
            n0,
            n1,
            first_failing_n2: first_failing_n2(&engine, n0, n1),
        })
        .collect();

    let frac = |k: usize, n: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
    Ok(MinimalReport {
        config: *cfg,
        threshold: model.threshold,
        samples_in_region: inside,
        samples_excluded: excluded,
        main_accuracy: frac(main_ok, inside),
        syntactic_accuracy: frac(syn_ok, inside),
        joint_accuracy: frac(joint_ok, inside),
        grid_max,
        grid_points,
        closed_form_agreement: frac(agree, grid_points),
        failures,
        failure_boundary,
    })
}

fn boundary_pairs() -> Vec<(u32, u32)> {
    [0u32, 1, 2, 5, 10, 20, 50]
        .into_iter()
        .flat_map(|k| [(k, k + 1), (k + 1, k)])
        .collect()
}

fn joint_correct(engine: &CountEngine<'_>, counts: CountTriple) -> bool {
    let expected = label_for(counts);
    argmax(&engine.forward(counts, QueryToken::Eq).logits) == expected
        && argmax(&engine.forward(counts, QueryToken::answer(expected)).logits) == Token::Eos
}

/// Exponential search then bisection; assumes failures persist once they appear.
fn first_failing_n2(engine: &CountEngine<'_>, n0: u32, n1: u32) -> Option<u32> {
    let fails = |n2: u32| !joint_correct(engine, CountTriple::new(n0, n1, n2));
    if fails(0) {
        return Some(0);
    }
    let mut hi: u64 = 1;
    while hi <= u32::MAX as u64 && !fails(hi as u32) {
        hi *= 2;
    }
    if hi > u32::MAX as u64 {
        return if fails(u32::MAX) { Some(u32::MAX) } else { None };
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fails(mid as u32) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_counts;

    #[test]
    fn threshold_at_ten() {
        let a = MinimalConfig::new(10.0).threshold();
        assert!((a - 10.731_058_578_630_005).abs() < 1e-9, "{a}");
    }

    #[test]
    fn closed_form_examples() {
        let cfg = MinimalConfig::new(10.0);
        let a = cfg.threshold();
        let y = closed_form_output(CountTriple::new(3, 2, 0), &cfg).unwrap();
        assert!((y - 10.6444).abs() < 1e-4 && y < a);
        assert_eq!(predict_closed_form(CountTriple::new(3, 2, 0), &cfg, QueryToken::Eq).unwrap(), Token::Five);
        let y = closed_form_output(CountTriple::new(2, 3, 0), &cfg).unwrap();
        assert!((y - 10.8030).abs() < 1e-4 && y > a);
        assert_eq!(predict_closed_form(CountTriple::new(2, 3, 0), &cfg, QueryToken::Eq).unwrap(), Token::Four);
        let tie = CountTriple::new(1, 1, 0);
        assert!((closed_form_output(tie, &cfg).unwrap() - a).abs() < 1e-12);
        assert_eq!(predict_closed_form(tie, &cfg, QueryToken::Eq).unwrap(), Token::Five);
        assert!(matches!(
            predict_closed_form(CountTriple::new(0, 0, 4), &cfg, QueryToken::Eq),
            Err(Error::OutsideValidity)
        ));
    }

    #[test]
    fn margin_matches_output_minus_threshold() {
        let cfg = MinimalConfig::new(12.0);
        for n0 in 0..20 {
            for n1 in 0..20 {
                if n0 + n1 == 0 {
                    continue;
                }
                let c = CountTriple::new(n0, n1, 0);
                let diff = closed_form_output(c, &cfg).unwrap() - cfg.threshold();
                assert!((diff - closed_form_margin(c).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layout_and_attention_table() {
        let m = build_minimal(&MinimalConfig::new(10.0)).unwrap();
        assert_eq!(m.params.embed.as_slice(), &[0.0, 10.0, 11.0, 0.0, 1.0, 100.0, 100.0, 0.0]);
        let engine = CountEngine::new(&m.config, &m.params).unwrap();
        let eq = Token::Eq.id();
        assert_eq!(engine.attention_logit(0, eq, Token::Zero.id()), 10.0);
        assert_eq!(engine.attention_logit(0, eq, Token::One.id()), 11.0);
        assert_eq!(engine.attention_logit(0, eq, Token::Two.id()), 0.0);
    }

    #[test]
    fn sign_correct_and_monotone_on_grid() {
        for skip in [false, true] {
            let cfg = MinimalConfig { skip, ..MinimalConfig::default() };
            let m = build_minimal(&cfg).unwrap();
            for n0 in 0..=40u32 {
                let mut prev = f64::NEG_INFINITY;
                for n1 in 0..=40u32 {
                    if n0 + n1 == 0 {
                        continue;
                    }
                    let c = CountTriple::new(n0, n1, 0);
                    let f = forward_counts(&m.config, &m.params, c, QueryToken::Eq).unwrap();
                    assert_eq!(argmax(&f.logits) == Token::Four, n1 > n0, "{c:?} skip={skip}");
                    let y = f.head_outputs[0];
                    assert!(y >= prev - 1e-12);
                    prev = y;
                }
            }
        }
    }

    #[test]
    fn eos_dominates_after_answer() {
        for n in [10.0, 15.0, 25.0] {
            let cfg = MinimalConfig::new(n);
            let m = build_minimal(&cfg).unwrap();
            for n0 in 0..=20 {
                for n1 in 0..=20 {
                    if n0 + n1 == 0 {
                        continue;
                    }
                    let c = CountTriple::new(n0, n1, 0);
                    let q = QueryToken::answer(label_for(c));
                    let z = forward_counts(&m.config, &m.params, c, q).unwrap().logits;
                    let eos = z[Token::Eos.id()];
                    assert!(eos > z[Token::Four.id()] && eos > z[Token::Five.id()]);
                }
            }
        }
    }

    #[test]
    fn verify_reports_boundary() {
        let samples = vec![Sample::new(CountTriple::new(0, 0, 3)), Sample::new(CountTriple::new(4, 5, 2))];
        let r = verify_minimal(&MinimalConfig::default(), &samples, 5).unwrap();
        assert_eq!((r.samples_in_region, r.samples_excluded), (1, 1));
        assert_eq!(r.joint_accuracy, 1.0);
        assert_eq!(r.closed_form_agreement, 1.0);
        // '4' answers eventually drown in '2' tokens; '5' answers never do.
        let up = r.failure_boundary.iter().find(|b| (b.n0, b.n1) == (1, 2)).unwrap();
        assert!(up.first_failing_n2.unwrap() > 1000);
        let down = r.failure_boundary.iter().find(|b| (b.n0, b.n1) == (2, 1)).unwrap();
        assert_eq!(down.first_failing_n2, None);
    }

    #[test]
    fn rejects_small_n() {
        assert!(build_minimal(&MinimalConfig::new(4.0)).is_err());
        assert!(build_minimal(&MinimalConfig { epsilon: 0.0, ..MinimalConfig::default() }).is_err());
    }
}
