mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use samie::backbone::Preset;
use samie::model::Architecture;

/// Semi-supervised key-phrase extraction: question selection and answer
/// extraction trained jointly from a few labeled triplets and many
/// sentence/answer pairs.
#[derive(Parser, Debug)]
#[command(name = "samie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a corpus to canonical JSONL and write the train/test split.
    Prepare(PrepareArgs),
    /// Train one model and write its checkpoint and metric log.
    Train(RunArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Train without labeled triplets and report how questions cluster.
    Cluster(RunArgs),
    /// Train and evaluate every cell of a kinds x sizes x seeds grid.
    Sweep(RunArgs),
    /// Re-render text and figures from finished eval or sweep outputs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// Two-column `token tag` lines, blank line between sentences.
    Bio,
    /// One annotated sentence per line.
    Jsonl,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Corpus to convert.
    #[arg(long, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    /// Generate this many synthetic flight-booking sentences instead of
    /// reading `--input`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 17)]
    pub synthetic_seed: u64,
    /// Question bank JSON; defaults to the built-in flight bank.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Rename a category, as `from=to`. Repeatable.
    #[arg(long = "alias", value_name = "FROM=TO")]
    pub aliases: Vec<String>,
    #[arg(long, default_value_t = 0.15)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 7)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Run configuration: a manifest file, flags, or both (flags win).
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub labeled_size: Option<usize>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub architecture: Option<Architecture>,
    /// Train on labeled triplets only.
    #[arg(long)]
    pub supervised: bool,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub p_th: Option<f64>,
    #[arg(long)]
    pub lambda_start: Option<f64>,
    #[arg(long)]
    pub lambda_end: Option<f64>,
    #[arg(long)]
    pub ramp_steps: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub labeled_batch: Option<usize>,
    #[arg(long)]
    pub unlabeled_batch: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test sentences (JSONL).
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Threshold for the rejection and verification rates; defaults to the
    /// checkpoint's.
    #[arg(long)]
    pub p_th: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// An eval or sweep output directory.
    #[arg(long)]
    pub from: PathBuf,
}

/// Error split by exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<samie::Error> for Failure {
    fn from(e: samie::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<samie::Error>() {
            Some(inner) if inner.is_validation() => Failure::Validation(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
