//! `shield`: generate instances, train a policy, evaluate, solve and
//! validate from the command line.
//!
//! Runtime failures print a single `shield: error[<kind>]: <message>` line
//! on stderr and exit with status 1. Usage errors exit with status 2.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shield_core::vrp::TaskSpec;

#[derive(Parser, Debug)]
#[command(name = "shield", version, about = "Multi-task vehicle routing with a learned constructive policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample instances of one task and write them as JSON lines.
    Generate(GenerateArgs),
    /// Train a policy from a JSON config, or resume from a checkpoint.
    Train(TrainArgs),
    /// Solve an instance file and report mean costs and gaps per task.
    Eval(EvalArgs),
    /// Solve an instance file and write one solution per line.
    Solve(SolveArgs),
    /// Check solutions against their instances.
    Validate(ValidateArgs),
}

fn parse_task(s: &str) -> Result<TaskSpec, String> {
    s.parse().map_err(|e: shield_core::vrp::VrpError| e.to_string())
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskSpec,
    /// Customers per instance.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    count: usize,
    /// `uniform` or `map:<path>`.
    #[arg(long, default_value = "uniform")]
    dist: String,
    /// Falls back to SHIELD_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the standard capacity for `--n`.
    #[arg(long)]
    capacity: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override fields of the JSON config.
#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_starts: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    capacity: Option<f64>,
    /// Comma-separated task names.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Repeatable; `uniform` or `map:<path>`.
    #[arg(long = "dist")]
    distributions: Option<Vec<String>>,
    /// Seed precedence: this flag, the config file, SHIELD_SEED, default.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON file with TrainConfig fields; missing fields take defaults.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint. Only `--epochs` and `--threads`
    /// may change on resume.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-epoch metrics CSV; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    /// Defaults to the checkpoint's training value.
    #[arg(long)]
    n_starts: Option<usize>,
    /// Decode the identity only instead of all eight symmetries.
    #[arg(long)]
    no_augment: bool,
    /// Additional sampled multi-start rollouts per symmetry.
    #[arg(long, default_value_t = 0)]
    samples: usize,
    /// Seed for `--samples`; falls back to SHIELD_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Reference solutions, one line per instance.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Use the built-in local-search baseline as the reference.
    #[arg(long, conflicts_with = "refs")]
    heuristic_refs: bool,
    /// Distribution label of the instance file.
    #[arg(long, default_value = "uniform")]
    dist: String,
    /// CSV report path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out_solutions: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    solutions: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Solve(a) => commands::solve(a),
        Command::Validate(a) => commands::validate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("shield: error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
