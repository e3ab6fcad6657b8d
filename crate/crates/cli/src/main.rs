use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// A bad flag, flag combination or config value (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(
    name = "asdbench",
    version,
    about = "Anomalous sound detection workbench"
)]
struct Cli {
    /// More logging (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic development-style dataset.
    Synth(SynthArgs),
    /// Train one scorer per machine type.
    Train(TrainArgs),
    /// Score the test clips and write challenge-format score files.
    Score(ScoreArgs),
    /// Compute AUC, pAUC and the official score from score files.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of machine types.
    #[arg(long)]
    pub machines: Option<usize>,
    /// Sections per machine type.
    #[arg(long)]
    pub sections: Option<u8>,
    #[arg(long, env = "ASDBENCH_SEED")]
    pub seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Normal source-domain training clips per section.
    #[arg(long)]
    pub source_train_clips: Option<u32>,
    /// Normal target-domain training clips per section.
    #[arg(long)]
    pub target_train_clips: Option<u32>,
    /// Normal and anomalous test clips (each) per section and domain.
    #[arg(long)]
    pub test_clips: Option<u32>,
    /// Give every section the same sound (degenerate corpus).
    #[arg(long)]
    pub identical_sections: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// ae, oe, gmm, knn, serial or ensemble.
    #[arg(long)]
    pub detector: Option<String>,
    /// Comma-separated ensemble members.
    #[arg(long, value_delimiter = ',')]
    pub members: Option<Vec<String>>,
    /// Use the target-domain training clips.
    #[arg(long)]
    pub adapt: bool,
    /// Cap on source training clips per section.
    #[arg(long)]
    pub max_train_clips: Option<usize>,
    #[arg(long, env = "ASDBENCH_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "models")]
    pub models: PathBuf,
    /// Comma-separated machine types (default: all).
    #[arg(long, value_delimiter = ',')]
    pub machines: Option<Vec<String>>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "models")]
    pub models: PathBuf,
    #[arg(long, default_value = "scores")]
    pub scores: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub machines: Option<Vec<String>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of score files (ignored with --trials).
    #[arg(long, default_value = "scores")]
    pub scores: PathBuf,
    /// Where to write metrics.csv and metrics.md (default: the scores
    /// directory).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Upper false-positive rate of the partial AUC.
    #[arg(long)]
    pub p: Option<f64>,
    /// Rerun train, score and eval in memory with seeds seed..seed+T-1 and
    /// report mean and standard deviation per cell.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub machines: Option<Vec<String>>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("error[1:usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Score(args) => commands::score(args),
        Command::Eval(args) => commands::eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = commands::classify(&e);
            let message = format!("{e:#}").replace('\n', "; ");
            eprintln!("error[{code}:{tag}]: {message}");
            ExitCode::from(code)
        }
    }
}
