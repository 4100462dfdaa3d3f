use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use pdettc_core::euler::{EulerError, Family};
use pdettc_core::nn::NnError;
use pdettc_core::rewards::RewardError;
use pdettc_core::surrogate::{SizePreset, SurrogateError, TrainError};
use pdettc_core::ttc::{RewardKind, TtcError};

mod commands;
mod config;
mod render;

use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Parser, Debug)]
#[command(
    name = "pdettc",
    version,
    about = "Test-time compute experiments for Euler surrogates"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed; takes precedence over PDETTC_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve initial conditions and write a dataset container.
    GenData(GenDataArgs),
    /// Pretrain a surrogate on a dataset's training split.
    Train(TrainArgs),
    /// Finetune a pretrained surrogate on a subset of training trajectories.
    Finetune(FinetuneArgs),
    /// Build triplets from model candidates and train a process reward model.
    TrainPrm(TrainPrmArgs),
    /// Greedy best-of-B rollouts over the test split.
    Rollout(RolloutArgs),
    /// Score rollouts against ground truth: metrics CSV and summary JSON.
    Evaluate(EvaluateArgs),
    /// Render MSE-vs-time plots and field images.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<Family>>,
    /// Trajectories per family.
    #[arg(long)]
    pub n: Option<usize>,
    /// Cells per side.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Dataset file [default: <out-dir>/data.bin].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct OptimArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// [default: <out-dir>/data.bin]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// vit3, vit5 or vit7.
    #[arg(long)]
    pub model: Option<String>,
    /// desk or paper.
    #[arg(long)]
    pub preset: Option<SizePreset>,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Continue from this checkpoint, keeping its optimizer state and step counter.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// [default: <out-dir>/model.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// [default: <out-dir>/model.ckpt]
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// [default: <out-dir>/data.bin]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of training trajectories to finetune on.
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// [default: <out-dir>/finetune_n<N>.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainPrmArgs {
    /// Surrogate that proposes the candidates [default: <out-dir>/model.ckpt].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// [default: <out-dir>/data.bin]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Candidates per snapshot pair.
    #[arg(long = "K", alias = "k")]
    pub k: Option<usize>,
    /// Triplet margin.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_trajectories: Option<usize>,
    /// Build triplets only from the finetuning subset of this size.
    #[arg(long)]
    pub finetune_subset: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: <out-dir>/prm.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    /// [default: <out-dir>/model.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// [default: <out-dir>/data.bin]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Required for the prm reward.
    #[arg(long)]
    pub prm: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub rewards: Option<Vec<RewardKind>>,
    #[arg(long = "B", alias = "b-list", value_delimiter = ',')]
    pub b_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub max_cases: Option<usize>,
    /// Model label in records and metrics [default: model file stem].
    #[arg(long)]
    pub tag: Option<String>,
    /// [default: <out-dir>/rollouts]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Rollout directories holding an index.json [default: every
    /// <out-dir>/rollouts/*].
    #[arg(long)]
    pub rollouts: Vec<PathBuf>,
    /// [default: <out-dir>/data.bin]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Keep only these rewards.
    #[arg(long, value_delimiter = ',')]
    pub reward: Option<Vec<RewardKind>>,
    /// [default: <out-dir>/metrics.csv]
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// [default: <out-dir>/summary.json]
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// [default: <out-dir>/summary.json]
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Rollout directories for field images [default: every <out-dir>/rollouts/*].
    #[arg(long)]
    pub rollouts: Vec<PathBuf>,
    /// Adds ground-truth images [default: <out-dir>/data.bin if present].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: <out-dir>/report]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn resolve_config(g: &GlobalArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(s) = std::env::var("PDETTC_SEED") {
        cfg.seed = s.trim().parse().map_err(|_| {
            CliError::Config(format!("PDETTC_SEED='{s}' is not an unsigned integer"))
        })?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.out_dir {
        cfg.out_dir.clone_from(d);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be positive".into()).into());
        }
        pdettc_core::par::set_worker_count(j);
    }
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Finetune(a) => commands::finetune(cfg, a),
        Command::TrainPrm(a) => commands::train_prm(cfg, a),
        Command::Rollout(a) => commands::rollout(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Report(a) => commands::report(cfg, a),
    }
}

fn nn_code(e: &NnError) -> Option<u8> {
    match e {
        NnError::NonFinite(_) | NnError::NonFiniteGradient(_) => Some(3),
        NnError::Config(_) | NnError::Shape(_) => Some(2),
        NnError::Io(_) => None,
    }
}

fn euler_code(e: &EulerError) -> Option<u8> {
    match e {
        EulerError::InvalidGrid(_) | EulerError::InvalidIc(_) | EulerError::InvalidConfig(_) => {
            Some(2)
        }
        EulerError::Shape(_) => None,
        _ => Some(3),
    }
}

fn surrogate_code(e: &SurrogateError) -> Option<u8> {
    match e {
        SurrogateError::Nn(e) => nn_code(e),
        SurrogateError::Euler(e) => euler_code(e),
        SurrogateError::Config(_) | SurrogateError::WrongKind { .. } => Some(2),
    }
}

fn cause_code(cause: &(dyn std::error::Error + 'static)) -> Option<u8> {
    if let Some(e) = cause.downcast_ref::<CliError>() {
        return Some(match e {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        });
    }
    if let Some(e) = cause.downcast_ref::<TrainError>() {
        return match e {
            TrainError::Diverged { .. } => Some(3),
            TrainError::Model(e) => surrogate_code(e),
        };
    }
    if let Some(e) = cause.downcast_ref::<RewardError>() {
        return match e {
            RewardError::Diverged { .. } => Some(3),
            RewardError::InvalidInput(_) | RewardError::GridMismatch => Some(2),
            RewardError::Nn(e) => nn_code(e),
            RewardError::Surrogate(e) => surrogate_code(e),
            RewardError::Euler(e) => euler_code(e),
            _ => None,
        };
    }
    if let Some(e) = cause.downcast_ref::<TtcError>() {
        if let TtcError::Config(_) = e {
            return Some(2);
        }
        return None;
    }
    if let Some(e) = cause.downcast_ref::<NnError>() {
        return nn_code(e);
    }
    if let Some(e) = cause.downcast_ref::<EulerError>() {
        return euler_code(e);
    }
    cause
        .downcast_ref::<SurrogateError>()
        .and_then(surrogate_code)
}

/// 2 for configuration errors, 3 for numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(cause_code).unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
