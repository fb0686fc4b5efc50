use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use countlab::data::{generate_split, Dataset, Sample, Split, SplitSpec};
use countlab::experiments::{self, FeasibilityCell, RunOptions, Scale};
use countlab::export::{write_csv, write_json};
use countlab::interventions::{attention_ratios, ratio_scatter, sweep_ratio, RatioAxis};
use countlab::minimal::{verify_minimal, MinimalConfig};
use countlab::model::{load_checkpoint, Checkpoint, CountEngine, ModelConfig, StorageDtype};
use countlab::probes::{collect_features, head_scatter_export, logit_distribution_export, subset_sweep, weighted_sacc_correlation, ProbeReport, SweepOptions};
use countlab::trainer::{evaluate, TrainConfig, TrainPath};

use crate::{AppendixBArgs, AxisArg, CheckpointSelect, Cli, Command, Dtype, ModelArgs, MultiRunArgs, SplitArg, SubsetMode, TrainingArgs};

struct Ctx<'a> {
    cli: &'a Cli,
    scale: Scale,
}

impl Ctx<'_> {
    fn data(&self) -> Result<Dataset> {
        Ok(Dataset::generate(self.cli.data_seed)?)
    }

    fn run_options(&self, t: &TrainingArgs) -> RunOptions {
        RunOptions {
            force: t.force,
            every_epoch: !t.final_only,
            dtype: match t.dtype {
                Dtype::F32 => StorageDtype::F32,
                Dtype::F64 => StorageDtype::F64,
            },
            scale: self.scale,
        }
    }
}

pub fn run(cli: &Cli) -> Result<String> {
    let ctx = Ctx {
        cli,
        scale: if cli.paper_scale { Scale::Paper } else { Scale::Desk },
    };
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Train(a) => train(&ctx, &a.model, &a.training),
        Command::Eval(a) => eval(&ctx, &a.select, a.split),
        Command::MinimalVerify(a) => minimal_verify(&ctx, a),
        Command::Probe(a) => probe(&ctx, &a.select, a.subsets, a.budget),
        Command::Intervene(a) => intervene(&ctx, &a.select, a.axis, a.points),
        Command::SweepGrid(a) => sweep_grid(&ctx, a),
        Command::AppendixB(a) => appendix_b(&ctx, a),
        Command::Evolution(a) => evolution(&ctx, &a.run),
        Command::RandomInit(a) => random_init(&ctx, a.heads_total, &a.model),
        Command::EosStats(a) => eos_stats(&ctx, a),
        Command::Correlation(a) => correlation(&ctx, &a.runs, a.from_epoch, a.to_epoch),
        Command::Export(a) => export(&ctx, a),
    }
}

fn model_config(m: &ModelArgs) -> ModelConfig {
    let mut c = ModelConfig::new(m.d, m.heads).with_layer_norm(!m.no_layer_norm);
    if let Some(h) = m.head_dim {
        c = c.with_head_dim(h);
    }
    c.scale_logits = m.scale_logits;
    c.dropout = m.dropout;
    c.skip_to_output = m.skip;
    c
}

fn train_config(model: ModelConfig, t: &TrainingArgs, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(model, seed);
    c.epochs = t.epochs;
    c.batch_size = t.batch_size;
    c.adam.lr = t.lr;
    c.adam.weight_decay = t.weight_decay;
    c.cosine_lr = t.cosine_lr;
    c.path = if t.full_path { TrainPath::FullReference } else { TrainPath::CountsFast };
    c
}

fn gen_data(ctx: &Ctx) -> Result<String> {
    let data = Dataset::generate(ctx.cli.seed)?;
    data.write_dir(&ctx.cli.out)?;
    Ok(format!(
        "gen-data: seed {} -> {} ({} train / {} val / {} test)",
        data.seed,
        ctx.cli.out.display(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    ))
}

fn train(ctx: &Ctx, m: &ModelArgs, t: &TrainingArgs) -> Result<String> {
    let cfg = train_config(model_config(m), t, ctx.cli.seed);
    let run = experiments::run_training(&ctx.cli.out, "train", &cfg, &ctx.data()?, &ctx.run_options(t))?;
    let acc = run.manifest.final_test.unwrap_or_default();
    Ok(format!(
        "train: {} {} test main {:.4} syntactic {:.4} joint {:.4} ({} checkpoints)",
        if run.skipped { "reused" } else { "trained" },
        run.dir.display(),
        acc.main,
        acc.syntactic,
        acc.joint,
        run.manifest.checkpoints.len()
    ))
}

struct Loaded {
    checkpoint: Checkpoint,
    path: PathBuf,
    /// Where exports go: the run's `exports/` or the checkpoint's directory.
    exports: PathBuf,
}

fn load(sel: &CheckpointSelect) -> Result<Loaded> {
    let (path, exports) = match &sel.run {
        Some(run) => {
            let list = experiments::run_checkpoints(run).with_context(|| format!("reading run {}", run.display()))?;
            let path = if sel.checkpoint == "last" {
                list.last().map(|(_, p)| p.clone())
            } else if let Ok(epoch) = sel.checkpoint.parse::<usize>() {
                list.iter().find(|(e, _)| *e == epoch).map(|(_, p)| p.clone())
            } else {
                Some(PathBuf::from(&sel.checkpoint))
            };
            let path = path.with_context(|| format!("no checkpoint `{}` in {}", sel.checkpoint, run.display()))?;
            (path, run.join("exports"))
        }
        None => {
            if sel.checkpoint == "last" || sel.checkpoint.parse::<usize>().is_ok() {
                bail!("--checkpoint {} needs --run", sel.checkpoint);
            }
            let path = PathBuf::from(&sel.checkpoint);
            let dir = path.parent().unwrap_or(Path::new(".")).join("exports");
            (path, dir)
        }
    };
    let checkpoint = load_checkpoint(&path)?;
    Ok(Loaded { checkpoint, path, exports })
}

fn epoch_tag(l: &Loaded) -> String {
    format!("epoch_{:03}", l.checkpoint.meta.epoch)
}

fn eval(ctx: &Ctx, sel: &CheckpointSelect, split: SplitArg) -> Result<String> {
    let l = load(sel)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let acc = evaluate(&l.checkpoint.config, &l.checkpoint.params, &ctx.data()?.samples(split))?;
    let path = l.exports.join(format!("eval_{}_{}.json", epoch_tag(&l), split.name()));
    write_json(&path, &acc)?;
    Ok(format!(
        "eval: {} {} main {:.4} syntactic {:.4} joint {:.4}",
        l.path.display(),
        split.name(),
        acc.main,
        acc.syntactic,
        acc.joint
    ))
}

fn minimal_verify(ctx: &Ctx, a: &crate::MinimalArgs) -> Result<String> {
    let cfg = MinimalConfig {
        n: a.n,
        epsilon: a.epsilon,
        skip: a.skip,
    };
    let mut spec = SplitSpec::default_for(Split::Train, ctx.cli.seed);
    spec.count = a.samples;
    let samples: Vec<Sample> = generate_split(&spec)?.iter().map(Sample::from).collect();
    let report = verify_minimal(&cfg, &samples, a.grid_max)?;
    let path = ctx.cli.out.join("minimal").join("report.json");
    write_json(&path, &report)?;
    Ok(format!(
        "minimal-verify: N={} joint {:.4} on {} samples ({} excluded), closed-form agreement {:.4} -> {}",
        a.n,
        report.joint_accuracy,
        report.samples_in_region,
        report.samples_excluded,
        report.closed_form_agreement,
        path.display()
    ))
}

#[derive(Serialize)]
struct PairCell {
    i: usize,
    j: usize,
    l_acc: f64,
    l_acc_syntactic: Option<f64>,
    roc_auc: Option<f64>,
    s_acc: Option<f64>,
}

fn probe(ctx: &Ctx, sel: &CheckpointSelect, mode: SubsetMode, budget: usize) -> Result<String> {
    let l = load(sel)?;
    let data = ctx.data()?;
    let (cfg, params) = (&l.checkpoint.config, &l.checkpoint.params);
    let engine = CountEngine::new(cfg, params)?;
    let train = collect_features(&engine, &data.samples(Split::Train), false);
    let test = collect_features(&engine, &data.samples(Split::Test), true);
    let opts = match mode {
        SubsetMode::Upto2 => SweepOptions {
            exhaustive_up_to: 2,
            budget_per_size: 0,
            max_sacc_size: 2,
            seed: ctx.cli.seed,
        },
        SubsetMode::All => SweepOptions {
            budget_per_size: budget,
            seed: ctx.cli.seed,
            ..SweepOptions::default()
        },
    };
    let sweep = subset_sweep(&train, &test, &opts)?;

    let tag = epoch_tag(&l);
    let pairs: Vec<PairCell> = sweep
        .subsets
        .iter()
        .filter(|s| s.size <= 2)
        .flat_map(|s| {
            let hs = countlab::probes::HeadSet(s.mask).heads();
            let (i, j) = (hs[0], *hs.last().expect("nonempty"));
            let cell = |i, j| PairCell {
                i,
                j,
                l_acc: s.l_acc,
                l_acc_syntactic: s.l_acc_syntactic,
                roc_auc: s.roc_auc,
                s_acc: s.s_acc,
            };
            if i == j {
                vec![cell(i, i)]
            } else {
                vec![cell(i, j), cell(j, i)]
            }
        })
        .collect();
    let mut pairs = pairs;
    pairs.sort_by_key(|c| (c.i, c.j));
    write_csv(&l.exports.join(format!("probe_{tag}_pairs.csv")), &pairs)?;
    write_csv(&l.exports.join(format!("probe_{tag}_subsets.csv")), &sweep.subsets)?;
    write_csv(&l.exports.join(format!("probe_{tag}_sizes.csv")), &sweep.summaries)?;
    let report = ProbeReport::new(
        Some(l.path.display().to_string()),
        Some(l.checkpoint.meta.seed),
        params,
        attention_ratios(&engine),
        &sweep.subsets,
    )?;
    write_json(&l.exports.join(format!("probe_{tag}.json")), &report)?;

    let singles: Vec<f64> = sweep.subsets.iter().filter(|s| s.size == 1).filter_map(|s| s.s_acc).collect();
    let good = singles.iter().filter(|&&s| s >= countlab::interventions::SUCCESS_THRESHOLD).count();
    let bad = singles.iter().filter(|&&s| s <= countlab::interventions::FAILURE_THRESHOLD).count();
    Ok(format!(
        "probe: {} heads, {} successful, {} failed, {} subsets -> {}",
        sweep.heads,
        good,
        bad,
        sweep.subsets.len(),
        l.exports.display()
    ))
}

fn intervene(ctx: &Ctx, sel: &CheckpointSelect, axis: AxisArg, points: usize) -> Result<String> {
    let l = load(sel)?;
    let data = ctx.data()?;
    let (train, test) = (data.samples(Split::Train), data.samples(Split::Test));
    let engine = CountEngine::new(&l.checkpoint.config, &l.checkpoint.params)?;
    let axes = match axis {
        AxisArg::W01 => vec![RatioAxis::W01],
        AxisArg::W02 => vec![RatioAxis::W02],
        AxisArg::Both => vec![RatioAxis::W01, RatioAxis::W02],
    };
    let tag = epoch_tag(&l);
    let mut written = Vec::new();
    for ax in axes {
        let grid = match (ax, points) {
            (_, 25) => ax.default_grid(),
            (RatioAxis::W01, p) => countlab::interventions::log_grid(1e-3, 1e3, p),
            (RatioAxis::W02, p) => countlab::interventions::log_grid(1e-2, 1e4, p),
        };
        let rows = sweep_ratio(&engine, ax, &grid, &train, &test)?;
        let path = l.exports.join(format!("intervene_{tag}_{}.csv", ax.name()));
        write_csv(&path, &rows)?;
        written.push(path.display().to_string());
    }
    Ok(format!("intervene: {} heads -> {}", engine.heads(), written.join(", ")))
}

fn sweep_grid(ctx: &Ctx, a: &crate::SweepGridArgs) -> Result<String> {
    let cells = experiments::parse_cells(&a.cells, !a.no_layer_norm)?;
    let n = a.seeds.unwrap_or(ctx.scale.grid_seeds());
    let seeds: Vec<u64> = (0..n as u64).map(|k| ctx.cli.seed + k).collect();
    let template = train_config(ModelConfig::new(32, 16), &a.training, ctx.cli.seed);
    let rows = experiments::sweep_grid(&ctx.cli.out, &cells, &seeds, &template, &ctx.data()?, &ctx.run_options(&a.training), ctx.cli.jobs)?;
    let path = ctx.cli.out.join("sweep-grid").join(format!("grid_{}.csv", scale_name(ctx.scale)));
    write_csv(&path, &rows)?;
    let skipped: usize = rows.iter().map(|r| r.skipped_runs).sum();
    Ok(format!("sweep-grid: {} cells x {} seeds ({} runs reused) -> {}", rows.len(), n, skipped, path.display()))
}

fn scale_name(s: Scale) -> &'static str {
    match s {
        Scale::Desk => "desk",
        Scale::Paper => "paper",
    }
}

fn appendix_b(ctx: &Ctx, a: &AppendixBArgs) -> Result<String> {
    let cells: Vec<FeasibilityCell> = ctx
        .scale
        .appendix_b_cells()
        .into_iter()
        .filter(|c| a.only_d.is_empty() || a.only_d.contains(&c.d))
        .map(|c| FeasibilityCell {
            runs: a.runs.unwrap_or(c.runs),
            ..c
        })
        .collect();
    let template = train_config(ModelConfig::new(1, 1), &a.training, ctx.cli.seed);
    let rows = experiments::appendix_b(&ctx.cli.out, &cells, &template, &ctx.data()?, &ctx.run_options(&a.training), ctx.cli.jobs)?;
    let dir = ctx.cli.out.join("appendix-b");
    let name = format!("table_{}", scale_name(ctx.scale));
    write_csv(&dir.join(format!("{name}.csv")), &rows)?;
    write_json(&dir.join(format!("{name}.json")), &rows)?;
    Ok(format!("appendix-b: {} rows -> {}", rows.len(), dir.join(format!("{name}.csv")).display()))
}

fn evolution(ctx: &Ctx, run: &Path) -> Result<String> {
    let rows = experiments::evolution(run, &ctx.data()?)?;
    let path = experiments::export_rows(run, "evolution.csv", &rows)?;
    let events = rows.iter().filter(|r| !r.event.is_empty()).count();
    Ok(format!("evolution: {} rows, {} threshold crossings -> {}", rows.len(), events, path.display()))
}

fn random_init(ctx: &Ctx, total: Option<usize>, m: &ModelArgs) -> Result<String> {
    let n = total.unwrap_or(ctx.scale.random_init_heads());
    let cfg = model_config(m);
    let report = experiments::random_init(&cfg, n, ctx.cli.seed, &ctx.data()?, ctx.scale, ctx.cli.jobs)?;
    let dir = ctx.cli.out.join("random-init");
    let name = format!("d{}-a{}-s{}-{}", cfg.d, cfg.heads, ctx.cli.seed, scale_name(ctx.scale));
    write_json(&dir.join(format!("{name}.json")), &report)?;
    write_csv(&dir.join(format!("{name}_histogram.csv")), &report.histogram)?;
    Ok(format!(
        "random-init: {} heads, perfect {:.2}%, >= 0.98 {:.2}%, > 0.8 {:.2}% -> {}",
        report.heads,
        100.0 * report.perfect_fraction,
        100.0 * report.success_fraction,
        100.0 * report.above_0_8_fraction,
        dir.display()
    ))
}

/// Final checkpoints of the given runs, or of freshly trained default runs.
fn collect_runs(ctx: &Ctx, a: &MultiRunArgs, default_count: usize, experiment: &str, data: &Dataset) -> Result<Vec<PathBuf>> {
    if !a.runs.is_empty() {
        return Ok(a.runs.clone());
    }
    (0..default_count as u64)
        .map(|k| {
            let cfg = train_config(ModelConfig::new(32, 16), &a.training, ctx.cli.seed + k);
            Ok(experiments::run_training(&ctx.cli.out, experiment, &cfg, data, &ctx.run_options(&a.training))?.dir)
        })
        .collect()
}

fn eos_stats(ctx: &Ctx, a: &MultiRunArgs) -> Result<String> {
    let data = ctx.data()?;
    let runs = collect_runs(ctx, a, ctx.scale.eos_runs(), "eos-stats", &data)?;
    let models = runs
        .iter()
        .map(|r| {
            let list = experiments::run_checkpoints(r)?;
            let (_, last) = list.last().with_context(|| format!("{} has no checkpoints", r.display()))?;
            let ck = load_checkpoint(last)?;
            Ok((ck.config, ck.params))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = experiments::eos_stats(&models, &data)?;
    let path = ctx.cli.out.join("eos-stats").join(format!("report_{}.json", scale_name(ctx.scale)));
    write_json(&path, &stats)?;
    Ok(format!(
        "eos-stats: singles {:.3} ± {:.3} ({} heads), pairs {:.3} ± {:.3} ({} pairs) -> {}",
        stats.singles_fraction,
        stats.singles_stderr,
        stats.singles,
        stats.pairs_fraction,
        stats.pairs_stderr,
        stats.pairs,
        path.display()
    ))
}

fn correlation(ctx: &Ctx, a: &MultiRunArgs, from: usize, to: usize) -> Result<String> {
    let data = ctx.data()?;
    let runs = collect_runs(ctx, a, ctx.scale.correlation_seeds(), "correlation", &data)?;
    let mut points = Vec::new();
    for r in &runs {
        points.extend(experiments::correlation_points(r, &data, from..=to)?);
    }
    let r = weighted_sacc_correlation(&points)?;
    let dir = ctx.cli.out.join("correlation");
    write_csv(&dir.join("points.csv"), &points)?;
    write_json(&dir.join("summary.json"), &serde_json::json!({ "pearson_r": r, "points": points.len(), "runs": runs.len() }))?;
    Ok(format!("correlation: r = {r:.4} over {} checkpoints of {} runs -> {}", points.len(), runs.len(), dir.display()))
}

fn export(ctx: &Ctx, sel: &CheckpointSelect) -> Result<String> {
    let l = load(sel)?;
    let data = ctx.data()?;
    let engine = CountEngine::new(&l.checkpoint.config, &l.checkpoint.params)?;
    let train = collect_features(&engine, &data.samples(Split::Train), false);
    let test = collect_features(&engine, &data.samples(Split::Test), true);
    let tag = epoch_tag(&l);
    let mut written = vec![
        write_to(&l.exports, &format!("logits_{tag}.csv"), &logit_distribution_export(&test)?)?,
        write_to(&l.exports, &format!("ratios_{tag}.csv"), &ratio_scatter(&engine, &train, &test)?)?,
    ];
    if engine.head_dim() == 2 {
        written.push(write_to(&l.exports, &format!("scatter_{tag}.csv"), &head_scatter_export(&engine, &train, &test)?)?);
    }
    Ok(format!("export: {}", written.join(", ")))
}

fn write_to<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<String> {
    let path = dir.join(name);
    write_csv(&path, rows)?;
    Ok(path.display().to_string())
}
