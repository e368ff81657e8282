//! `reder`: corpus generation, training, translation, evaluation and
//! reversibility inspection for the duplex model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reder::RederError;

use config::{DecodeKind, Rerank};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or file layout.
    Usage(String),
    /// A library contract failed (bad input data, corrupt checkpoint, ...).
    Contract(String),
    /// Training produced a non-finite value.
    Diverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Contract(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Contract(m) => write!(f, "{m}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl From<RederError> for CliError {
    fn from(e: RederError) -> Self {
        match e {
            RederError::Config(_) => CliError::Usage(e.to_string()),
            RederError::NonFinite(_) => CliError::Diverged(e.to_string()),
            other => CliError::Contract(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Contract(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Contract(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "reder", version, about = "Reversible duplex Transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus and its vocabulary.
    Gen(GenArgs),
    /// Train one duplex model on both directions of a corpus.
    Train(TrainArgs),
    /// Decode a file line by line in one direction.
    Translate(TranslateArgs),
    /// Measure continuous and token-level reversibility.
    InspectReversibility(InspectArgs),
    /// Exact match, BLEU and round-trip reconstruction on a corpus split.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    /// cipher-swap, reversal or copy-noise.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub dev_pairs: Option<usize>,
    #[arg(long)]
    pub test_pairs: Option<usize>,
    /// Distinct data symbols.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub doubling_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, metrics and the effective config.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub total_updates: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub stage1_fraction: Option<f64>,
    #[arg(long)]
    pub lambda_fba: Option<f64>,
    #[arg(long)]
    pub lambda_cc: Option<f64>,
    /// Same as --lambda-fba 0.
    #[arg(long)]
    pub no_fba: bool,
    /// Same as --lambda-cc 0.
    #[arg(long)]
    pub no_cc: bool,
    /// Rejected: the layer stack is reversible by construction.
    #[arg(long)]
    pub no_revnet_symmetric: bool,
    /// Train one direction only (x2y or y2x).
    #[arg(long)]
    pub unidirectional: Option<String>,
    /// Rebuild activations from layer inverses during backprop.
    #[arg(long)]
    pub recompute: bool,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub rel_clip: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Updates between dev evaluations (0: once per epoch).
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub dev_limit: Option<usize>,
    /// Stop after this many updates, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Clone)]
pub struct DecodeArgs {
    #[arg(long, value_enum)]
    pub decode: Option<DecodeKind>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, value_enum)]
    pub rerank: Option<Rerank>,
}

#[derive(Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// x2y or y2x.
    #[arg(long)]
    pub direction: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint; without it a freshly initialised model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Zero every layer weight of the fresh model.
    #[arg(long)]
    pub zero_layers: bool,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Token lines to probe; random sequences when absent.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Random sequences to probe without --samples.
    #[arg(long, default_value_t = 32)]
    pub random_samples: usize,
    /// Direction of the token-level round trip (x2y or y2x).
    #[arg(long, default_value = "x2y")]
    pub direction: String,
    /// Also write the report (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// x2y, y2x or both.
    #[arg(long, default_value = "both")]
    pub direction: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Also write the report lines (JSONL) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::InspectReversibility(a) => commands::inspect(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("reder: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
