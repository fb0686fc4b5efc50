//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion ids such as
//! `c3 c11` to run a subset. Exits nonzero if any selected criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use countlab::data::{generate_sentence, generate_split, Dataset, Interval, Sample, Sentence, Split, SplitSpec};
use countlab::experiments::{self, FeasibilityCell, RunOptions};
use countlab::interventions::{attention_ratios, intervened_s_acc, FAILURE_THRESHOLD, SUCCESS_THRESHOLD};
use countlab::minimal::{verify_minimal, MinimalConfig};
use countlab::model::{forward_positions, init_params, loss_counts, loss_full, CountEngine, ModelConfig, ModelParams, QueryToken};
use countlab::numerics::{grad_check, Matrix};
use countlab::probes::{
    collect_features, fit_linear_svm, head_weights, l_acc, pearson, roc_auc, svm_objective, weighted_s_acc, HeadSet, DEFAULT_C,
};
use countlab::trainer::{evaluate, train, Accuracy, InMemoryCheckpoints, TrainConfig};

const DATA_SEED: u64 = 0;
const TRAIN_SEEDS: [u64; 4] = [1, 2, 3, 4];
const CONVERGED: f64 = 0.99;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// A default-configuration training run with every epoch's parameters.
struct Trajectory {
    seed: u64,
    config: ModelConfig,
    final_test: Accuracy,
    snapshots: Vec<(usize, ModelParams)>,
    secs: f64,
}

impl Trajectory {
    fn final_params(&self) -> &ModelParams {
        &self.snapshots.last().expect("at least one epoch").1
    }

    fn converged(&self) -> bool {
        self.final_test.joint >= CONVERGED
    }
}

/// Singleton s-acc and l-acc of one model.
struct HeadStudy {
    s_acc: Vec<f64>,
    l_acc: Vec<f64>,
    full_l_acc: f64,
    model_main: f64,
}

struct Ctx {
    data: Dataset,
    train: Vec<Sample>,
    test: Vec<Sample>,
    trajectories: Option<Vec<Trajectory>>,
}

impl Ctx {
    fn trajectories(&mut self) -> &[Trajectory] {
        if self.trajectories.is_none() {
            let data = &self.data;
            let runs = TRAIN_SEEDS
                .par_iter()
                .map(|&seed| {
                    let cfg = TrainConfig::new(ModelConfig::new(32, 16), seed);
                    let start = Instant::now();
                    let mut snaps = InMemoryCheckpoints::default();
                    let out = train(&cfg, data, &mut snaps).expect("training succeeds");
                    Trajectory {
                        seed,
                        config: cfg.model.clone(),
                        final_test: out.log.last().expect("epochs").test,
                        snapshots: snaps.snapshots,
                        secs: start.elapsed().as_secs_f64(),
                    }
                })
                .collect();
            self.trajectories = Some(runs);
        }
        self.trajectories.as_deref().unwrap()
    }

    fn study(&self, config: &ModelConfig, params: &ModelParams) -> HeadStudy {
        let engine = CountEngine::new(config, params).unwrap();
        let train_f = collect_features(&engine, &self.train, false);
        let test_f = collect_features(&engine, &self.test, false);
        let a = config.heads;
        let s_acc = (0..a).map(|h| countlab::probes::s_acc(HeadSet::single(h), &train_f, &test_f).unwrap()).collect();
        let l = (0..a).map(|h| l_acc(HeadSet::single(h), &test_f)).collect();
        HeadStudy {
            s_acc,
            l_acc: l,
            full_l_acc: l_acc(HeadSet::full(a), &test_f),
            model_main: evaluate(config, params, &self.test).unwrap().main,
        }
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn frac(v: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    v.iter().filter(|&&x| pred(x)).count() as f64 / v.len().max(1) as f64
}

/// Random model with weights spread wide enough that attention is far from uniform.
fn spread_model(d: usize, heads: usize, seed: u64, factor: f64) -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig::new(d, heads);
    let mut p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    p.for_each_mut(|name, m| {
        if name != "ln_gamma" {
            m.scale(factor)
        }
    });
    (cfg, p)
}

fn c1_gradients(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let (cfg, p) = spread_model(4, 2, 21, 25.0);
    let spec = SplitSpec {
        split: Split::Train,
        count: 1,
        n01: Interval::new(0, 8),
        n2: Interval::new(0, 5),
        seed: 22,
    };
    let sentences: Vec<Sentence> = (0..8).map(|i| generate_sentence(&mut spec.rng_for(i), &spec)).collect();
    let samples: Vec<Sample> = sentences.iter().map(Sample::from).collect();

    let analytic = loss_counts(&cfg, &p, &samples).unwrap().grad.flatten();
    let mut probe = p.clone();
    let counts = grad_check(
        |x| {
            probe.assign_flat(x);
            loss_counts(&cfg, &probe, &samples).unwrap().loss
        },
        &p.flatten(),
        &analytic,
        1e-6,
    );
    let analytic = loss_full::<ChaCha8Rng>(&cfg, &p, &sentences, None).grad.flatten();
    let full = grad_check(
        |x| {
            probe.assign_flat(x);
            loss_full::<ChaCha8Rng>(&cfg, &probe, &sentences, None).loss
        },
        &p.flatten(),
        &analytic,
        1e-6,
    );
    let worst = counts.max_rel_error.max(full.max_rel_error);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 10.0,
        format!("max rel error {worst:.2e} over {} params (count route {:.2e}, token route {:.2e}), {secs:.2} s", p.num_params(), counts.max_rel_error, full.max_rel_error),
    )
}

fn c2_fast_path(_: &mut Ctx) -> Verdict {
    let (cfg, p) = spread_model(32, 16, 31, 40.0);
    let engine = CountEngine::new(&cfg, &p).unwrap();
    let mut worst: f64 = 0.0;
    let mut sentences = Vec::with_capacity(1000);
    for (i, split) in Split::ALL.iter().cycle().take(1000).enumerate() {
        let spec = SplitSpec::default_for(*split, 1000 + i as u64);
        let s = generate_sentence(&mut spec.rng_for(i), &spec);
        let (full, _) = forward_positions(&cfg, &p, &s.tokens, &[s.eq_position(), s.answer_position()], false);
        let eq = engine.forward(s.counts, QueryToken::Eq).logits;
        let ans = engine.forward(s.counts, QueryToken::answer(s.answer)).logits;
        for t in 0..8 {
            worst = worst.max((full[0][t] - eq[t]).abs()).max((full[1][t] - ans[t]).abs());
        }
        sentences.push(s);
    }
    let mut loss_gap: f64 = 0.0;
    for batch in sentences.chunks(64) {
        let samples: Vec<Sample> = batch.iter().map(Sample::from).collect();
        let fast = loss_counts(&cfg, &p, &samples).unwrap().loss;
        let full = loss_full::<ChaCha8Rng>(&cfg, &p, batch, None).loss;
        loss_gap = loss_gap.max((fast - full).abs());
    }
    verdict(
        worst <= 1e-9 && loss_gap <= 1e-9,
        format!("max |Δlogit| {worst:.2e} on 1000 sentences, max batch loss gap {loss_gap:.2e}"),
    )
}

fn c3_minimal(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let mut spec = SplitSpec::default_for(Split::Train, 41);
    spec.count = 1200;
    let samples: Vec<Sample> = generate_split(&spec)
        .unwrap()
        .iter()
        .map(Sample::from)
        .filter(|s| s.counts.n0 + s.counts.n1 > 0)
        .take(1000)
        .collect();
    let report = verify_minimal(&MinimalConfig::new(15.0), &samples, 30).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        samples.len() == 1000 && report.joint_accuracy == 1.0 && report.closed_form_agreement == 1.0 && secs < 30.0,
        format!(
            "joint {:.4} on {} sentences, closed-form agreement {:.4} on {} grid points, {secs:.2} s",
            report.joint_accuracy, report.samples_in_region, report.closed_form_agreement, report.grid_points
        ),
    )
}

fn c4_trainability(ctx: &mut Ctx) -> Verdict {
    let runs = &ctx.trajectories()[..3];
    let joint: Vec<f64> = runs.iter().map(|r| r.final_test.joint).collect();
    let ok = joint.iter().filter(|&&j| j >= CONVERGED).count();
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    verdict(
        ok >= 2 && slowest <= 1800.0,
        format!("{ok}/3 seeds reach joint ≥ 0.99 ({}), slowest run {slowest:.1} s", fmt_list(&joint)),
    )
}

fn converged_studies(ctx: &mut Ctx) -> Vec<(u64, ModelConfig, ModelParams, HeadStudy)> {
    let runs: Vec<(u64, ModelConfig, ModelParams)> = ctx.trajectories()[..3]
        .iter()
        .filter(|r| r.converged())
        .map(|r| (r.seed, r.config.clone(), r.final_params().clone()))
        .collect();
    runs.into_iter()
        .map(|(seed, cfg, p)| {
            let study = ctx.study(&cfg, &p);
            (seed, cfg, p, study)
        })
        .collect()
}

fn c5_taxonomy(ctx: &mut Ctx) -> Verdict {
    let studies = converged_studies(ctx);
    if studies.is_empty() {
        return verdict(false, "no converged run");
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, _, _, s) in &studies {
        let good = frac(&s.s_acc, |x| x >= SUCCESS_THRESHOLD);
        let bad = frac(&s.s_acc, |x| x <= FAILURE_THRESHOLD);
        pass &= good >= 0.25 && bad >= 0.25;
        parts.push(format!("seed {seed}: {:.0}% ≥ 0.98, {:.0}% ≤ 0.6", 100.0 * good, 100.0 * bad));
    }
    verdict(pass, parts.join("; "))
}

fn c6_lacc_gap(ctx: &mut Ctx) -> Verdict {
    let studies = converged_studies(ctx);
    if studies.is_empty() {
        return verdict(false, "no converged run");
    }
    let mut pass = false;
    let mut parts = Vec::new();
    for (seed, _, _, s) in &studies {
        let chance = frac(&s.l_acc, |x| (0.45..=0.55).contains(&x));
        let full_matches = (s.full_l_acc - s.model_main).abs() < 1e-12;
        pass |= chance >= 0.75 && full_matches;
        parts.push(format!(
            "seed {seed}: {:.0}% of singletons in [0.45, 0.55], full set {:.4} vs model {:.4}",
            100.0 * chance,
            s.full_l_acc,
            s.model_main
        ));
    }
    verdict(pass, parts.join("; "))
}

fn c7_ratios(ctx: &mut Ctx) -> Verdict {
    let studies = converged_studies(ctx);
    if studies.is_empty() {
        return verdict(false, "no converged run");
    }
    let mut checked = 0;
    let mut violations = Vec::new();
    for (seed, cfg, p, s) in &studies {
        let engine = CountEngine::new(cfg, p).unwrap();
        for r in attention_ratios(&engine) {
            if s.s_acc[r.head] >= SUCCESS_THRESHOLD {
                checked += 1;
                if !((0.05..=20.0).contains(&r.w01) && r.w02 > 5.0) {
                    violations.push(format!("s{seed}h{} (w01 {:.3}, w02 {:.3})", r.head, r.w01, r.w02));
                }
            }
        }
    }
    let mut detail = format!("{} of {checked} successful heads violate w01 ∈ [0.05, 20], w02 > 5", violations.len());
    if !violations.is_empty() {
        let shown = violations.len().min(4);
        detail += &format!(": {}", violations[..shown].join(", "));
        if violations.len() > shown {
            detail += ", ...";
        }
    }
    verdict(checked > 0 && violations.is_empty(), detail)
}

fn c8_interventions(ctx: &mut Ctx) -> Verdict {
    let studies = converged_studies(ctx);
    if studies.is_empty() {
        return verdict(false, "no converged run");
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, cfg, p, _) in &studies {
        let engine = CountEngine::new(cfg, p).unwrap();
        let at = |w01: f64| -> Vec<f64> {
            (0..cfg.heads)
                .map(|h| intervened_s_acc(&engine, h, &ctx.train, &ctx.test, w01, f64::INFINITY).unwrap())
                .collect()
        };
        let balanced = at(1.0);
        let skewed = at(1e3);
        let min = balanced.iter().copied().fold(1.0, f64::min);
        let mean = skewed.iter().sum::<f64>() / skewed.len() as f64;
        pass &= min >= 0.95 && mean < 0.8;
        parts.push(format!("seed {seed}: min at w01=1 {min:.4}, mean at w01=1e3 {mean:.4}"));
    }
    verdict(pass, parts.join("; "))
}

fn c9_correlation(ctx: &mut Ctx) -> Verdict {
    ctx.trajectories();
    let trajectories = ctx.trajectories.as_ref().unwrap();
    let jobs: Vec<(u64, &ModelConfig, usize, &ModelParams)> = trajectories
        .iter()
        .flat_map(|t| {
            t.snapshots
                .iter()
                .filter(|(e, _)| (10..=100).contains(e))
                .map(move |(e, p)| (t.seed, &t.config, *e, p))
        })
        .collect();
    let points: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|(_, cfg, _, p)| {
            let engine = CountEngine::new(cfg, p).unwrap();
            let tr = collect_features(&engine, &ctx.train, false);
            let te = collect_features(&engine, &ctx.test, false);
            let accs: Vec<f64> = (0..cfg.heads).map(|h| countlab::probes::s_acc(HeadSet::single(h), &tr, &te).unwrap()).collect();
            let hw = head_weights(p).unwrap();
            (weighted_s_acc(&hw, &accs), evaluate(cfg, p, &ctx.test).unwrap().main)
        })
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
    match pearson(&x, &y) {
        Ok(r) => verdict(r >= 0.5, format!("Pearson r = {r:.4} over {} checkpoints of {} seeds", x.len(), trajectories.len())),
        Err(e) => verdict(false, format!("correlation undefined: {e}")),
    }
}

fn c10_random_init(ctx: &mut Ctx) -> Verdict {
    let report = experiments::random_init(&ModelConfig::new(32, 16), 2000, 101, &ctx.data, experiments::Scale::Desk, 1).unwrap();
    let p = report.perfect_fraction;
    verdict(
        (0.003..=0.03).contains(&p),
        format!(
            "perfect fraction {:.2}% of {} heads (≥ 0.98: {:.2}%, > 0.8: {:.2}%)",
            100.0 * p,
            report.heads,
            100.0 * report.success_fraction,
            100.0 * report.above_0_8_fraction
        ),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += match scores[i].total_cmp(&scores[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    num / den
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn separable_dataset(rng: &mut ChaCha8Rng) -> (Matrix, Vec<f64>) {
    let dim = rng.random_range(1..=6);
    let n = rng.random_range(10..=200);
    let w: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let b: f64 = rng.random_range(-1.0..1.0);
    let mut data = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    while y.len() < n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
        if m.abs() < 0.2 {
            continue;
        }
        // Both classes are forced into the first two rows.
        let label = match y.len() {
            0 if m < 0.0 => continue,
            1 if m > 0.0 => continue,
            _ => m.signum(),
        };
        data.extend(x);
        y.push(label);
    }
    (Matrix::from_vec(n, dim, data).unwrap(), y)
}

fn c11_metric_oracles(_: &mut Ctx) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut auc_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.37).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        if roc_auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
    }

    let mut beaten = 0;
    let mut not_separated = 0;
    for _ in 0..20 {
        let (x, y) = separable_dataset(&mut rng);
        let m = fit_linear_svm(&x, &y, DEFAULT_C).unwrap();
        if m.accuracy(&x, &y) < 1.0 {
            not_separated += 1;
        }
        let dim = x.cols();
        let scale = (m.weights.iter().map(|w| w * w).sum::<f64>() + m.bias * m.bias).sqrt().max(1.0);
        for k in 0..1000 {
            // Half the probes roam globally, half sit close to the optimum.
            let (w, b): (Vec<f64>, f64) = if k % 2 == 0 {
                let s = 2.0 * scale;
                ((0..dim).map(|_| rng.random_range(-s..s)).collect(), rng.random_range(-s..s))
            } else {
                let s = 1e-3 * scale;
                (
                    m.weights.iter().map(|w| w + s * normal(&mut rng)).collect(),
                    m.bias + s * normal(&mut rng),
                )
            };
            if svm_objective(&x, &y, &w, b, DEFAULT_C) < m.objective {
                beaten += 1;
            }
        }
    }
    verdict(
        auc_mismatch == 0 && beaten == 0 && not_separated == 0,
        format!("{auc_mismatch}/100 AUC mismatches, {beaten}/20000 probes below the SVM optimum, {not_separated}/20 datasets not separated"),
    )
}

fn c12_appendix_b(ctx: &mut Ctx) -> Verdict {
    let out = tempfile::tempdir().unwrap();
    let cells = [FeasibilityCell { d: 2, heads: 1, runs: 20 }, FeasibilityCell { d: 32, heads: 1, runs: 20 }];
    let template = TrainConfig::new(ModelConfig::new(1, 1), 1);
    let opts = RunOptions {
        every_epoch: false,
        ..RunOptions::default()
    };
    let rows = experiments::appendix_b(out.path(), &cells, &template, &ctx.data, &opts, rayon::current_num_threads()).unwrap();
    let (small, large) = (&rows[0], &rows[1]);
    verdict(
        large.success_fraction > small.success_fraction,
        format!(
            "s-acc ≥ 0.98: d=2 {:.0}% vs d=32 {:.0}% (perfect {:.0}% vs {:.0}%)",
            100.0 * small.success_fraction,
            100.0 * large.success_fraction,
            100.0 * small.perfect_fraction,
            100.0 * large.perfect_fraction
        ),
    )
}

fn c13_determinism(ctx: &mut Ctx) -> Verdict {
    let mut cfg = TrainConfig::new(ModelConfig::new(32, 16), 7);
    cfg.epochs = 5;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outputs: Vec<(Vec<u8>, Vec<u8>)> = dirs
        .iter()
        .map(|d| {
            let run = experiments::run_training(d.path(), "determinism", &cfg, &ctx.data, &RunOptions::default()).unwrap();
            let rows = experiments::evolution(&run.dir, &ctx.data).unwrap();
            let evo = experiments::export_rows(&run.dir, "evolution.csv", &rows).unwrap();
            (std::fs::read(run.dir.join("metrics.csv")).unwrap(), std::fs::read(evo).unwrap())
        })
        .collect();
    let metrics_same = outputs[0].0 == outputs[1].0;
    let evo_same = outputs[0].1 == outputs[1].1;
    verdict(
        metrics_same && evo_same,
        format!(
            "metrics.csv {} ({} bytes), evolution.csv {}",
            if metrics_same { "identical" } else { "differs" },
            outputs[0].0.len(),
            if evo_same { "identical" } else { "differs" }
        ),
    )
}

type Criterion = fn(&mut Ctx) -> Verdict;

const CRITERIA: [(&str, &str, Criterion); 13] = [
    ("c1", "gradient correctness", c1_gradients),
    ("c2", "fast-path exactness", c2_fast_path),
    ("c3", "minimal solution", c3_minimal),
    ("c4", "trainability", c4_trainability),
    ("c5", "head taxonomy", c5_taxonomy),
    ("c6", "l-acc gap", c6_lacc_gap),
    ("c7", "ratio pattern", c7_ratios),
    ("c8", "interventions", c8_interventions),
    ("c9", "weighted s-acc correlation", c9_correlation),
    ("c10", "random-init distribution", c10_random_init),
    ("c11", "metric oracles", c11_metric_oracles),
    ("c12", "feasibility trend with d", c12_appendix_b),
    ("c13", "determinism", c13_determinism),
];

fn main() {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_lowercase()).collect();
    let data = Dataset::generate(DATA_SEED).expect("dataset");
    let mut ctx = Ctx {
        train: data.samples(Split::Train),
        test: data.samples(Split::Test),
        data,
        trajectories: None,
    };
    let total = Instant::now();
    let (mut passed, mut failed) = (0, 0);
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.iter().any(|s| s == id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| run(&mut ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if v.pass {
            passed += 1;
        } else {
            failed += 1;
        }
        println!(
            "{:<4} {}  {name}: {} [{}]",
            id.to_uppercase(),
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            secs(start.elapsed())
        );
    }
    println!("acceptance: {passed} passed, {failed} failed in {}", secs(total.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
