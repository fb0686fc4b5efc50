use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "countlab", version, about = "Count01 attention-only transformer experiments")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Output root. COUNTLAB_OUT takes precedence when set.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Model seed (data seed for gen-data).
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Seed of the dataset used by every training and probing command.
    #[arg(long, global = true, default_value_t = 0)]
    pub data_seed: u64,
    /// Concurrent runs for multi-run commands.
    #[arg(long, global = true, default_value_t = default_jobs())]
    pub jobs: usize,
    /// Use the full run counts instead of the desk-scale defaults.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    /// TOML file of flag values: top-level keys are global flags, `[<command>]` tables hold command flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the three splits as token files and counts CSVs.
    GenData,
    /// Train one model into <out>/train/<run-id>.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a split.
    Eval(EvalArgs),
    /// Build and check the hand-constructed one-dimensional solution.
    MinimalVerify(MinimalArgs),
    /// Head metrics over subsets, head weights and attention ratios.
    Probe(ProbeArgs),
    /// Attention-ratio intervention sweeps.
    Intervene(InterveneArgs),
    /// Train a grid of (d, heads) cells over several seeds.
    SweepGrid(SweepGridArgs),
    /// Single-dimensional-head feasibility table.
    AppendixB(AppendixBArgs),
    /// Per-epoch singleton s-acc and head weights of a run.
    Evolution(RunSelect),
    /// s-acc distribution of randomly initialised heads.
    RandomInit(RandomInitArgs),
    /// Probability that single heads and head pairs solve the [EOS] task alone.
    EosStats(MultiRunArgs),
    /// Weighted singleton s-acc against model accuracy across checkpoints.
    Correlation(CorrelationArgs),
    /// Logit distributions, head-output scatter and ratio scatter for one checkpoint.
    Export(CheckpointSelect),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 16)]
    pub heads: usize,
    /// Per-head dimension; defaults to d / heads.
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub no_layer_norm: bool,
    /// Divide attention logits by sqrt(head_dim).
    #[arg(long)]
    pub scale_logits: bool,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Route the query embedding straight to the output.
    #[arg(long)]
    pub skip: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long)]
    pub cosine_lr: bool,
    /// Train on explicit token sequences (needed for dropout).
    #[arg(long)]
    pub full_path: bool,
    /// Keep only the final checkpoint.
    #[arg(long)]
    pub final_only: bool,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    /// Retrain even if a completed run with the same configuration exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunSelect {
    /// Run directory (contains manifest.json).
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointSelect {
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// `last`, an epoch number, or a checkpoint file path.
    #[arg(long, default_value = "last")]
    pub checkpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub select: CheckpointSelect,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Args)]
pub struct MinimalArgs {
    #[arg(long, default_value_t = 15.0)]
    pub n: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    #[arg(long)]
    pub skip: bool,
    /// Sentences drawn from the test-split generator (n0 + n1 > 0 kept).
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 30)]
    pub grid_max: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsetMode {
    /// s-acc on singletons and pairs only.
    Upto2,
    /// s-acc also on a sample of every larger size.
    All,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub select: CheckpointSelect,
    #[arg(long, value_enum, default_value_t = SubsetMode::Upto2)]
    pub subsets: SubsetMode,
    /// Subsets sampled per size above two when --subsets all.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    W01,
    W02,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub select: CheckpointSelect,
    #[arg(long, value_enum, default_value_t = AxisArg::Both)]
    pub axis: AxisArg,
    /// Log-spaced grid size per axis.
    #[arg(long, default_value_t = 25)]
    pub points: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepGridArgs {
    /// Comma-separated DxA cells.
    #[arg(long, default_value = "32x16,16x8,8x4,4x2,2x1,1x1,32x1,32x32")]
    pub cells: String,
    /// Seeds per cell; defaults to 3, or 10 with --paper-scale.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub no_layer_norm: bool,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AppendixBArgs {
    /// Override the run count of every row.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Restrict to these d values (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub only_d: Vec<usize>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RandomInitArgs {
    /// Heads to draw; defaults to 2000, or 10000 with --paper-scale.
    #[arg(long)]
    pub heads_total: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MultiRunArgs {
    /// Existing run directories; when absent, default-config runs are trained.
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CorrelationArgs {
    #[command(flatten)]
    pub runs: MultiRunArgs,
    #[arg(long, default_value_t = 10)]
    pub from_epoch: usize,
    #[arg(long, default_value_t = 100)]
    pub to_epoch: usize,
}

fn main() -> ExitCode {
    let argv = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return report_error("config", &e),
    };
    let mut cli = Cli::parse_from(argv);
    if let Some(out) = std::env::var_os("COUNTLAB_OUT") {
        cli.out = PathBuf::from(out);
    }
    let name = command_name(&cli.command);
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => report_error(name, &e),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::MinimalVerify(_) => "minimal-verify",
        Command::Probe(_) => "probe",
        Command::Intervene(_) => "intervene",
        Command::SweepGrid(_) => "sweep-grid",
        Command::AppendixB(_) => "appendix-b",
        Command::Evolution(_) => "evolution",
        Command::RandomInit(_) => "random-init",
        Command::EosStats(_) => "eos-stats",
        Command::Correlation(_) => "correlation",
        Command::Export(_) => "export",
    }
}

/// One JSON object on stderr: command, message and cause chain.
fn report_error(command: &str, e: &anyhow::Error) -> ExitCode {
    let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
    let payload = serde_json::json!({
        "status": "error",
        "command": command,
        "message": e.to_string(),
        "causes": causes,
    });
    eprintln!("{payload}");
    ExitCode::FAILURE
}
