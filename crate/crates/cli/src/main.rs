//! `flipkit`: dataset statistics, embedding, training, prediction and
//! evaluation for emotion recognition and emotion-flip trigger reasoning.
//!
//! Machine-readable results are JSON on stdout (or `--output`); progress and
//! text tables go to stderr. Exit codes: 0 success, 1 invalid input or usage,
//! 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "flipkit", version, about = "Emotion recognition and flip-trigger reasoning toolkit")]
pub struct Cli {
    /// Random seed for learning commands (default: a fixed constant)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with training settings; command-line flags take precedence
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Suppress progress messages and text tables on stderr
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset statistics and trigger label skew
    Stats(StatsArgs),
    /// Embed every utterance into a cache file
    Embed(EmbedArgs),
    /// Train the recognition model (task 1)
    TrainErc(TrainArgs),
    /// Train the trigger model (tasks 2 and 3)
    TrainEfr(TrainEfrArgs),
    /// Predict per-utterance emotions
    PredictErc(PredictArgs),
    /// Predict per-utterance trigger decisions
    PredictEfr(PredictEfrArgs),
    /// Score a prediction file against gold labels
    Eval(EvalArgs),
    /// Score a fixed baseline predictor
    Baseline(BaselineArgs),
    /// Compare trigger F1 with zone masking off and on
    AblatePtz(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    /// Predict `neutral` everywhere (task 1)
    Neutral,
    /// Predict the utterance before each target as the only trigger (tasks 2-3)
    Rule,
}

#[derive(Debug, Args)]
pub struct TaskData {
    /// Sub-task: 1 recognition, 2 code-mixed flips, 3 English flips
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub task: u8,
    /// Input JSON file
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct OutputArg {
    /// Write the JSON result here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: TaskData,
    /// Add the window-and-zone row to the skew table
    #[arg(long)]
    pub ptz: bool,
    /// Trigger candidate window
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Speakers given a one-hot slot, for the coverage figure
    #[arg(long, default_value_t = 6)]
    pub top_speakers: usize,
    #[command(flatten)]
    pub out: OutputArg,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub input: TaskData,
    /// Embedding cache file (created or extended)
    #[arg(long, value_name = "PATH")]
    pub cache: PathBuf,
    /// Encoder provider: tei, voyage or stub (default depends on the task)
    #[arg(long)]
    pub provider: Option<String>,
    /// Encoder model name
    #[arg(long)]
    pub model: Option<String>,
    /// Vector width (stub provider only; others use the task default)
    #[arg(long)]
    pub dim: Option<usize>,
    /// Concurrent encoder requests
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub out: OutputArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: TaskData,
    /// Embedding cache covering every utterance
    #[arg(long, value_name = "PATH")]
    pub cache: PathBuf,
    /// Checkpoint to write
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// JSON-lines training log (default: CKPT with `.log.jsonl` appended)
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    /// Training epochs (default depends on the task)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate (default depends on the task)
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Instances per optimization step (default depends on the task)
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of conversations held out for checkpoint selection
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Validate every N epochs
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainEfrArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Mask decisions to the trigger zone when validating
    #[arg(long, value_enum)]
    pub ptz_mask: Option<Switch>,
    /// Trigger candidate window
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Input JSON file
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Embedding cache covering every utterance
    #[arg(long, value_name = "PATH")]
    pub cache: PathBuf,
    #[command(flatten)]
    pub out: OutputArg,
}

#[derive(Debug, Args)]
pub struct PredictEfrArgs {
    #[command(flatten)]
    pub predict: PredictArgs,
    /// Mask decisions to the trigger zone (default: as trained)
    #[arg(long, value_enum)]
    pub ptz_mask: Option<Switch>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sub-task: 1 recognition, 2 code-mixed flips, 3 English flips
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub task: u8,
    /// Gold-labelled input JSON file
    #[arg(long, value_name = "PATH")]
    pub gold: PathBuf,
    /// Prediction JSON file
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    /// Mask trigger predictions to the zone before scoring
    #[arg(long, value_enum, default_value = "off")]
    pub ptz_mask: Switch,
    #[command(flatten)]
    pub out: OutputArg,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub input: TaskData,
    /// Baseline predictor
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    #[command(flatten)]
    pub out: OutputArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
