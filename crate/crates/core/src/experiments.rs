//! Run directories, manifests and the multi-run experiments built on them.
//!
//! Layout: `<out>/<experiment>/<run-id>/{manifest.json, checkpoints/, metrics.csv, exports/}`.
//! A run whose manifest is complete and whose config hash matches is not
//! retrained unless forced.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::export::{write_csv, write_json};
use crate::interventions::{FAILURE_THRESHOLD, SUCCESS_THRESHOLD};
use crate::model::{init_params, load_checkpoint, save_checkpoint, CheckpointMeta, CountEngine, ModelConfig, ModelParams, StorageDtype};
use crate::probes::{collect_features, head_weights, l_acc_syntactic, s_acc, weighted_s_acc, CorrelationPoint, HeadFeatures, HeadSet};
use crate::trainer::{train, Accuracy, EpochObserver, EpochRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl Scale {
    pub fn grid_seeds(self) -> usize {
        match self {
            Scale::Desk => 3,
            Scale::Paper => 10,
        }
    }

    pub fn random_init_heads(self) -> usize {
        match self {
            Scale::Desk => 2000,
            Scale::Paper => 10000,
        }
    }

    pub fn eos_runs(self) -> usize {
        match self {
            Scale::Desk => 1,
            Scale::Paper => 5,
        }
    }

    pub fn correlation_seeds(self) -> usize {
        4
    }

    /// Rows of the fixed-`head_dim = 1` feasibility table.
    pub fn appendix_b_cells(self) -> Vec<FeasibilityCell> {
        let cell = |d, heads, runs| FeasibilityCell { d, heads, runs };
        match self {
            Scale::Desk => vec![
                cell(32, 1, 20),
                cell(16, 1, 20),
                cell(8, 1, 20),
                cell(4, 1, 20),
                cell(2, 1, 20),
                cell(2, 64, 2),
                cell(1, 1, 20),
                cell(1, 64, 2),
            ],
            Scale::Paper => vec![
                cell(32, 1, 100),
                cell(16, 1, 100),
                cell(8, 1, 100),
                cell(4, 1, 100),
                cell(2, 1, 300),
                cell(2, 64, 100),
                cell(1, 1, 650),
                cell(1, 64, 20),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDigests {
    pub train: String,
    pub val: String,
    pub test: String,
}

impl DatasetDigests {
    pub fn of(data: &Dataset) -> Self {
        Self {
            train: data.digest(Split::Train),
            val: data.digest(Split::Val),
            test: data.digest(Split::Test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub data_seed: u64,
    pub dataset: DatasetDigests,
    pub train: TrainConfig,
    /// Relative to the run directory.
    pub checkpoints: Vec<String>,
    pub status: RunStatus,
    pub scale: Scale,
    pub final_test: Option<Accuracy>,
}

impl RunManifest {
    pub fn final_checkpoint(&self) -> Option<&str> {
        self.checkpoints.last().map(String::as_str)
    }
}

/// SHA-256 over the canonical JSON of `(train config, data seed, digests)`.
pub fn config_hash(train: &TrainConfig, data_seed: u64, digests: &DatasetDigests) -> Result<String> {
    let canonical = serde_json::to_string(&(train, data_seed, digests))?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

pub fn run_id(train: &TrainConfig, hash: &str) -> String {
    let m = &train.model;
    format!(
        "d{}-a{}-h{}-{}-s{}-{}",
        m.d,
        m.heads,
        m.head_dim,
        if m.layer_norm { "ln" } else { "noln" },
        train.seed,
        &hash[..10]
    )
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:03}.json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub force: bool,
    /// Write a checkpoint after every epoch rather than only the last.
    pub every_epoch: bool,
    pub dtype: StorageDtype,
    pub scale: Scale,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            force: false,
            every_epoch: true,
            dtype: StorageDtype::F64,
            scale: Scale::Desk,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub params: ModelParams,
    /// True when an existing completed run was reused.
    pub skipped: bool,
}

struct DiskCheckpoints<'a> {
    dir: &'a Path,
    config: &'a TrainConfig,
    run_id: &'a str,
    every_epoch: bool,
    dtype: StorageDtype,
    written: Vec<String>,
}

impl EpochObserver for DiskCheckpoints<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, params: &ModelParams, is_final: bool) -> Result<()> {
        if !(self.every_epoch || is_final) {
            return Ok(());
        }
        let name = checkpoint_name(record.epoch);
        let meta = CheckpointMeta {
            epoch: record.epoch,
            seed: self.config.seed,
            is_final,
            run_id: Some(self.run_id.to_string()),
        };
        save_checkpoint(&self.config.model, params, &meta, &self.dir.join(&name), self.dtype)?;
        self.written.push(name);
        Ok(())
    }
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trains one run into `<out>/<experiment>/<run-id>`, or reuses a completed one.
pub fn run_training(out: &Path, experiment: &str, train_cfg: &TrainConfig, data: &Dataset, opts: &RunOptions) -> Result<RunOutcome> {
    train_cfg.validate()?;
    let digests = DatasetDigests::of(data);
    let hash = config_hash(train_cfg, data.seed, &digests)?;
    let id = run_id(train_cfg, &hash);
    let dir = out.join(experiment).join(&id);

    if !opts.force {
        if let Ok(existing) = read_manifest(&dir) {
            if existing.dataset != digests {
                return Err(Error::Config(format!("run {id} was produced from different dataset digests")));
            }
            if existing.status == RunStatus::Completed && existing.config_hash == hash {
                if let Some(last) = existing.final_checkpoint() {
                    let params = load_checkpoint(&dir.join(last))?.params;
                    return Ok(RunOutcome {
                        dir,
                        manifest: existing,
                        params,
                        skipped: true,
                    });
                }
            }
        }
    }

    if dir.join("checkpoints").exists() {
        fs::remove_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(dir.join("exports")).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = RunManifest {
        run_id: id.clone(),
        experiment: experiment.to_string(),
        config_hash: hash,
        seed: train_cfg.seed,
        data_seed: data.seed,
        dataset: digests,
        train: train_cfg.clone(),
        checkpoints: Vec::new(),
        status: RunStatus::Running,
        scale: opts.scale,
        final_test: None,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    let mut observer = DiskCheckpoints {
        dir: &dir,
        config: train_cfg,
        run_id: &id,
        every_epoch: opts.every_epoch,
        dtype: opts.dtype,
        written: Vec::new(),
    };
    let result = train(train_cfg, data, &mut observer);
    manifest.checkpoints = observer.written;
    match result {
        Ok(outcome) => {
            let csv = outcome.log.to_csv()?;
            let metrics = dir.join("metrics.csv");
            fs::write(&metrics, csv).map_err(|e| Error::io(&metrics, e))?;
            manifest.final_test = outcome.log.last().map(|r| r.test);
            manifest.status = RunStatus::Completed;
            write_json(&dir.join("manifest.json"), &manifest)?;
            Ok(RunOutcome {
                dir,
                manifest,
                params: outcome.params,
                skipped: false,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed { message: e.to_string() };
            write_json(&dir.join("manifest.json"), &manifest)?;
            Err(e)
        }
    }
}

/// `(epoch, path)` of every checkpoint listed in a run's manifest.
pub fn run_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let manifest = read_manifest(run_dir)?;
    manifest
        .checkpoints
        .iter()
        .map(|c| {
            let epoch = c
                .trim_start_matches("checkpoints/epoch_")
                .trim_end_matches(".json")
                .parse()
                .map_err(|_| Error::Config(format!("unrecognised checkpoint name {c}")))?;
            Ok((epoch, run_dir.join(c)))
        })
        .collect()
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Train and test features of a model at '=' (and the answer position for test).
pub fn features_for(config: &ModelConfig, params: &ModelParams, data: &Dataset) -> Result<(HeadFeatures, HeadFeatures)> {
    let engine = CountEngine::new(config, params)?;
    Ok((
        collect_features(&engine, &data.samples(Split::Train), false),
        collect_features(&engine, &data.samples(Split::Test), true),
    ))
}

pub fn singleton_s_acc(train: &HeadFeatures, test: &HeadFeatures) -> Result<Vec<f64>> {
    (0..test.heads).map(|h| s_acc(HeadSet::single(h), train, test)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub d: usize,
    pub heads: usize,
    pub layer_norm: bool,
}

impl GridCell {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        Ok(())
    }
}

/// Parses `DxA` items separated by commas, e.g. `32x16,8x4`.
pub fn parse_cells(spec: &str, layer_norm: bool) -> Result<Vec<GridCell>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (d, a) = item
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("grid cell `{item}` is not of the form DxA")))?;
            let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("bad number in `{item}`")));
            let cell = GridCell {
                d: parse(d)?,
                heads: parse(a)?,
                layer_norm,
            };
            cell.validate()?;
            Ok(cell)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub d: usize,
    pub heads: usize,
    pub layer_norm: bool,
    pub seeds: usize,
    pub mean_joint: f64,
    pub std_joint: f64,
    pub mean_main: f64,
    pub std_main: f64,
    pub skipped_runs: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Trains every cell for every seed and reports the final test accuracy per cell.
pub fn sweep_grid(
    out: &Path,
    cells: &[GridCell],
    seeds: &[u64],
    template: &TrainConfig,
    data: &Dataset,
    opts: &RunOptions,
    jobs: usize,
) -> Result<Vec<GridRow>> {
    for c in cells {
        c.validate()?;
    }
    let jobs_list: Vec<TrainConfig> = cells
        .iter()
        .flat_map(|c| {
            seeds.iter().map(move |&seed| TrainConfig {
                model: ModelConfig::new(c.d, c.heads).with_layer_norm(c.layer_norm),
                seed,
                ..template.clone()
            })
        })
        .collect();
    let results: Vec<Result<RunOutcome>> =
        thread_pool(jobs)?.install(|| jobs_list.par_iter().map(|cfg| run_training(out, "sweep-grid", cfg, data, opts)).collect());
    let results: Vec<RunOutcome> = results.into_iter().collect::<Result<_>>()?;

    Ok(cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let runs = &results[i * seeds.len()..(i + 1) * seeds.len()];
            let finals: Vec<Accuracy> = runs.iter().map(|r| r.manifest.final_test.unwrap_or_default()).collect();
            let (mean_joint, std_joint) = mean_std(&finals.iter().map(|a| a.joint).collect::<Vec<_>>());
            let (mean_main, std_main) = mean_std(&finals.iter().map(|a| a.main).collect::<Vec<_>>());
            GridRow {
                d: c.d,
                heads: c.heads,
                layer_norm: c.layer_norm,
                seeds: seeds.len(),
                mean_joint,
                std_joint,
                mean_main,
                std_main,
                skipped_runs: runs.iter().filter(|r| r.skipped).count(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityCell {
    pub d: usize,
    pub heads: usize,
    pub runs: usize,
}

impl FeasibilityCell {
    pub fn model(&self) -> ModelConfig {
        ModelConfig::new(self.d, self.heads).with_head_dim(1).with_layer_norm(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub d: usize,
    pub runs: usize,
    pub heads_per_run: usize,
    pub total_heads: usize,
    pub success_fraction: f64,
    pub perfect_fraction: f64,
    pub scale: Scale,
}

/// Trains `runs` models per cell with one-dimensional heads and no layer
/// norm; counts heads whose s-acc reaches the success threshold or 1.0.
pub fn appendix_b(
    out: &Path,
    cells: &[FeasibilityCell],
    template: &TrainConfig,
    data: &Dataset,
    opts: &RunOptions,
    jobs: usize,
) -> Result<Vec<FeasibilityRow>> {
    let pool = thread_pool(jobs)?;
    cells
        .iter()
        .map(|cell| {
            let configs: Vec<TrainConfig> = (0..cell.runs as u64)
                .map(|k| TrainConfig {
                    model: cell.model(),
                    seed: template.seed + k,
                    ..template.clone()
                })
                .collect();
            let accs: Vec<Result<Vec<f64>>> = pool.install(|| {
                configs
                    .par_iter()
                    .map(|cfg| {
                        let run = run_training(out, "appendix-b", cfg, data, opts)?;
                        let (tr, te) = features_for(&cfg.model, &run.params, data)?;
                        singleton_s_acc(&tr, &te)
                    })
                    .collect()
            });
            let accs: Vec<f64> = accs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
            let total = accs.len();
            let frac = |pred: &dyn Fn(f64) -> bool| accs.iter().filter(|&&s| pred(s)).count() as f64 / total.max(1) as f64;
            Ok(FeasibilityRow {
                d: cell.d,
                runs: cell.runs,
                heads_per_run: cell.heads,
                total_heads: total,
                success_fraction: frac(&|s| s >= SUCCESS_THRESHOLD),
                perfect_fraction: frac(&|s| s == 1.0),
                scale: opts.scale,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRow {
    pub epoch: usize,
    pub head: usize,
    pub s_acc: f64,
    pub hw: f64,
    /// `rose_above_0.98`, `fell_below_0.98`, `rose_above_0.6`, `fell_below_0.6` or empty.
    pub event: String,
}

fn crossing(prev: Option<f64>, now: f64) -> String {
    let Some(prev) = prev else { return String::new() };
    let mut events = Vec::new();
    for t in [SUCCESS_THRESHOLD, FAILURE_THRESHOLD] {
        if prev < t && now >= t {
            events.push(format!("rose_above_{t}"));
        } else if prev >= t && now < t {
            events.push(format!("fell_below_{t}"));
        }
    }
    events.join(";")
}

/// Per-epoch singleton s-acc and head weight for every checkpoint of a run.
pub fn evolution(run_dir: &Path, data: &Dataset) -> Result<Vec<EvolutionRow>> {
    let mut rows = Vec::new();
    let mut prev: Vec<Option<f64>> = Vec::new();
    for (epoch, path) in run_checkpoints(run_dir)? {
        let ck = load_checkpoint(&path)?;
        let (tr, te) = features_for(&ck.config, &ck.params, data)?;
        let accs = singleton_s_acc(&tr, &te)?;
        let hw = head_weights(&ck.params)?;
        prev.resize(accs.len(), None);
        for (h, (&s, &w)) in accs.iter().zip(&hw).enumerate() {
            rows.push(EvolutionRow {
                epoch,
                head: h,
                s_acc: s,
                hw: w,
                event: crossing(prev[h], s),
            });
            prev[h] = Some(s);
        }
    }
    Ok(rows)
}

/// Weighted singleton s-acc against main test accuracy for checkpoints in `epochs`.
pub fn correlation_points(run_dir: &Path, data: &Dataset, epochs: std::ops::RangeInclusive<usize>) -> Result<Vec<CorrelationPoint>> {
    let manifest = read_manifest(run_dir)?;
    let test: Vec<Sample> = data.samples(Split::Test);
    let mut points = Vec::new();
    for (epoch, path) in run_checkpoints(run_dir)? {
        if !epochs.contains(&epoch) {
            continue;
        }
        let ck = load_checkpoint(&path)?;
        let (tr, te) = features_for(&ck.config, &ck.params, data)?;
        let accs = singleton_s_acc(&tr, &te)?;
        let hw = head_weights(&ck.params)?;
        let model_accuracy = crate::trainer::evaluate(&ck.config, &ck.params, &test)?.main;
        points.push(CorrelationPoint {
            seed: manifest.seed,
            epoch,
            weighted_s_acc: weighted_s_acc(&hw, &accs),
            model_accuracy,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInitReport {
    pub model: ModelConfig,
    pub seed: u64,
    pub heads: usize,
    pub perfect_fraction: f64,
    pub success_fraction: f64,
    pub above_0_8_fraction: f64,
    pub histogram: Vec<HistogramBin>,
    pub s_acc: Vec<f64>,
    pub scale: Scale,
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = ((v * bins as f64).floor() as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// s-acc of `n_heads` freshly initialised heads. Model `k` draws its
/// parameters from stream `k` of a generator seeded with `seed`.
pub fn random_init(config: &ModelConfig, n_heads: usize, seed: u64, data: &Dataset, scale: Scale, jobs: usize) -> Result<RandomInitReport> {
    let models = n_heads.div_ceil(config.heads);
    let per_model: Vec<Result<Vec<f64>>> = thread_pool(jobs)?.install(|| {
        (0..models as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k);
                let params = init_params(config, &mut rng)?;
                let (tr, te) = features_for(config, &params, data)?;
                singleton_s_acc(&tr, &te)
            })
            .collect()
    });
    let mut accs: Vec<f64> = per_model.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    accs.truncate(n_heads);
    let n = accs.len().max(1) as f64;
    let count = |pred: &dyn Fn(f64) -> bool| accs.iter().filter(|&&s| pred(s)).count() as f64 / n;
    Ok(RandomInitReport {
        model: config.clone(),
        seed,
        heads: accs.len(),
        perfect_fraction: count(&|s| s == 1.0),
        success_fraction: count(&|s| s >= SUCCESS_THRESHOLD),
        above_0_8_fraction: count(&|s| s > 0.8),
        histogram: histogram(&accs, 20),
        s_acc: accs,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosStats {
    pub runs: usize,
    pub singles: usize,
    pub singles_perfect: usize,
    pub singles_fraction: f64,
    pub singles_stderr: f64,
    pub pairs: usize,
    pub pairs_perfect: usize,
    pub pairs_fraction: f64,
    pub pairs_stderr: f64,
    /// Runs whose full head set reaches perfect [EOS] accuracy.
    pub full_set_perfect: usize,
}

fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

/// Fractions of single heads and head pairs whose ablated model emits [EOS]
/// after every test answer.
pub fn eos_stats(models: &[(ModelConfig, ModelParams)], data: &Dataset) -> Result<EosStats> {
    let test = data.samples(Split::Test);
    let (mut singles, mut singles_perfect, mut pairs, mut pairs_perfect, mut full) = (0, 0, 0, 0, 0);
    for (config, params) in models {
        let engine = CountEngine::new(config, params)?;
        let f = collect_features(&engine, &test, true);
        let a = f.heads;
        for i in 0..a {
            singles += 1;
            singles_perfect += (l_acc_syntactic(HeadSet::single(i), &f)? == 1.0) as usize;
            for j in i + 1..a {
                pairs += 1;
                pairs_perfect += (l_acc_syntactic(HeadSet::from_heads(&[i, j]), &f)? == 1.0) as usize;
            }
        }
        full += (l_acc_syntactic(HeadSet::full(a), &f)? == 1.0) as usize;
    }
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let (sf, pf) = (frac(singles_perfect, singles), frac(pairs_perfect, pairs));
    Ok(EosStats {
        runs: models.len(),
        singles,
        singles_perfect,
        singles_fraction: sf,
        singles_stderr: binomial_stderr(sf, singles),
        pairs,
        pairs_perfect,
        pairs_fraction: pf,
        pairs_stderr: binomial_stderr(pf, pairs),
        full_set_perfect: full,
    })
}

/// Writes rows to `<run>/exports/<name>` and returns the path.
pub fn export_rows<T: Serialize>(run_dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf> {
    let path = run_dir.join("exports").join(name);
    write_csv(&path, rows)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interval;

    fn tiny_data() -> Dataset {
        Dataset::generate_with(0, |mut s| {
            s.count = 80;
            s.n01 = Interval::new(s.n01.lo / 10, s.n01.hi / 10);
            s.n2 = Interval::new(0, s.n2.hi / 10);
            s
        })
        .unwrap()
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(ModelConfig::new(4, 2), seed);
        c.epochs = 3;
        c
    }

    #[test]
    fn cells_parse_and_validate() {
        let cells = parse_cells("32x16, 8x4", true).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!((cells[1].d, cells[1].heads), (8, 4));
        assert!(parse_cells("6x4", true).is_err());
        assert!(parse_cells("6-4", true).is_err());
    }

    #[test]
    fn hash_tracks_config_and_data() {
        let data = tiny_data();
        let dg = DatasetDigests::of(&data);
        let a = config_hash(&tiny_cfg(1), 0, &dg).unwrap();
        assert_eq!(a, config_hash(&tiny_cfg(1), 0, &dg).unwrap());
        assert_ne!(a, config_hash(&tiny_cfg(2), 0, &dg).unwrap());
        let other = DatasetDigests::of(&Dataset::generate_with(1, |mut s| {
            s.count = 80;
            s
        })
        .unwrap());
        assert_ne!(a, config_hash(&tiny_cfg(1), 0, &other).unwrap());
    }

    #[test]
    fn run_is_idempotent_unless_forced() {
        let out = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let opts = RunOptions::default();
        let first = run_training(out.path(), "train", &tiny_cfg(1), &data, &opts).unwrap();
        assert!(!first.skipped);
        assert_eq!(first.manifest.checkpoints.len(), 3);
        assert_eq!(first.manifest.status, RunStatus::Completed);
        let metrics = fs::read_to_string(first.dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 4);

        let again = run_training(out.path(), "train", &tiny_cfg(1), &data, &opts).unwrap();
        assert!(again.skipped);
        assert_eq!(again.params, first.params);

        let forced = run_training(out.path(), "train", &tiny_cfg(1), &data, &RunOptions { force: true, ..opts }).unwrap();
        assert!(!forced.skipped);
        assert_eq!(fs::read_to_string(forced.dir.join("metrics.csv")).unwrap(), metrics);

        let ck = run_checkpoints(&first.dir).unwrap();
        assert_eq!(ck.iter().map(|(e, _)| *e).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn final_only_checkpointing() {
        let out = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            every_epoch: false,
            ..RunOptions::default()
        };
        let run = run_training(out.path(), "x", &tiny_cfg(4), &tiny_data(), &opts).unwrap();
        assert_eq!(run.manifest.checkpoints, vec![checkpoint_name(3)]);
        let ck = load_checkpoint(&run.dir.join(&run.manifest.checkpoints[0])).unwrap();
        assert!(ck.meta.is_final);
    }

    #[test]
    fn evolution_rows_cover_every_epoch_and_head() {
        let out = tempfile::tempdir().unwrap();
        let data = tiny_data();
        let run = run_training(out.path(), "train", &tiny_cfg(2), &data, &RunOptions::default()).unwrap();
        let rows = evolution(&run.dir, &data).unwrap();
        assert_eq!(rows.len(), 3 * 2);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.s_acc)));
        assert_eq!(crossing(Some(0.5), 0.99), "rose_above_0.98;rose_above_0.6");
        assert_eq!(crossing(Some(0.99), 0.97), "fell_below_0.98");
        assert_eq!(crossing(None, 0.99), "");
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[0.0, 0.49, 0.5, 1.0], 2);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn random_init_counts_heads() {
        let data = tiny_data();
        let r = random_init(&ModelConfig::new(4, 2), 5, 7, &data, Scale::Desk, 1).unwrap();
        assert_eq!(r.heads, 5);
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 5);
        let again = random_init(&ModelConfig::new(4, 2), 5, 7, &data, Scale::Desk, 2).unwrap();
        assert_eq!(r.s_acc, again.s_acc);
    }

    #[test]
    fn eos_stats_on_minimal_solution() {
        let m = crate::minimal::build_minimal(&crate::minimal::MinimalConfig::default()).unwrap();
        let s = eos_stats(&[(m.config, m.params)], &tiny_data()).unwrap();
        assert_eq!((s.singles, s.pairs), (1, 0));
        assert_eq!(s.full_set_perfect, 1);
        assert_eq!(s.singles_fraction, 1.0);
    }
}
