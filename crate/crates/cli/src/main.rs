//! `latent-chain`: dataset preparation, training, composition and evaluation.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_chain::Error;

#[derive(Debug, Parser)]
#[command(
    name = "latent-chain",
    version,
    about = "Composable shared-latent image translation"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Omits wall-clock fields from artifacts so reruns are bit-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (for `compose`, the grid image path).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Builds marginal domains from an attribute index.
    PrepareData(PrepareArgs),
    /// Generates the procedural red/blue by striped/plain corpus.
    SynthData(SynthArgs),
    /// Trains a pair, a joint model, or a warm-started joint model.
    Train(TrainArgs),
    /// Applies a translation chain to images and writes a grid.
    Compose(ComposeArgs),
    /// Computes the variety or presence metric.
    Evaluate(EvaluateArgs),
    /// Trains the attribute-combination classifier.
    TrainClassifier(ClassifierArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub experiment: Option<ExperimentArg>,
    #[arg(long, value_enum)]
    pub materialize: Option<MaterializeArg>,
    /// Print counts without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExperimentArg {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaterializeArg {
    None,
    Symlink,
    Copy,
    Preprocess,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub per_domain: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Pair,
    Joint,
    #[value(name = "warm_start", alias = "warm-start")]
    WarmStart,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    /// Two domain names, e.g. `red,blue`.
    #[arg(long, value_delimiter = ',')]
    pub pair: Vec<String>,
    /// Pair checkpoints to warm-start from.
    #[arg(long, num_args = 2)]
    pub from: Vec<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Joint checkpoint, or one directory per pair in domain order.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub chain: String,
    /// Image files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub save_intermediates: Option<PathBuf>,
    /// Sample latent noise at inference.
    #[arg(long)]
    pub noise: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cycle,
    Presence,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Domain pair for the cycle metric; all configured pairs otherwise.
    #[arg(long, value_delimiter = ',')]
    pub pair: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub sample_size: usize,
    #[arg(long)]
    pub chain: Option<String>,
    /// Source domain of the presence batch.
    #[arg(long)]
    pub source: Option<String>,
    /// Expected class per stage, as labels or indices.
    #[arg(long, value_delimiter = ',')]
    pub expected: Vec<String>,
    /// Trained classifier directory; the synthetic oracle otherwise.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    /// Prepared synthetic dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Attribute index for the hair colour by smiling classes.
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub max_per_class: usize,
}

/// Maps a failure to the documented exit-code classes.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::Parse { .. }
                | Error::Transplant { .. }
                | Error::Format { .. } => 2,
                Error::Io(_) | Error::Ingest { .. } | Error::Checkpoint(_) | Error::Json(_) => 3,
                Error::Diverged { .. } => 4,
                Error::Contract(_) | Error::Numerical { .. } => 1,
            };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
