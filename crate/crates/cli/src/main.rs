mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use enadpool::PoolMode;

/// Hierarchical graph classification with attention-weighted hard pooling.
#[derive(Debug, Parser)]
#[command(name = "enadpool", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cross-validate (or train one fold) on a TUDataset directory.
    Train(TrainArgs),
    /// Finite-difference check of the analytic gradients on a small model.
    Gradcheck(GradcheckArgs),
    /// Print reachability, exact-distance masks and topologies of one graph.
    InspectMasks(InspectArgs),
    /// Evaluate a checkpoint on its recorded train or validation split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TUDataset directory, e.g. ./PROTEINS
    #[arg(long)]
    pub data: PathBuf,
    /// JSON object with ModelConfig/TrainConfig keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PoolMode>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train only this fold instead of all of them.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    /// Cap for one-hot degree features on datasets without node labels.
    #[arg(long, default_value_t = 10)]
    pub degree_cap: usize,
    /// Defaults to ./runs/<timestamp>.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel_folds: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Mode to check; all four when omitted.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PoolMode>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Scales one backward rule to make the check fail on purpose.
    #[arg(long, hide = true)]
    pub fault_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Zero-based graph index.
    #[arg(long, default_value_t = 0)]
    pub graph: usize,
    #[arg(long, default_value_t = enadpool::mdgnn::DEFAULT_HOPS)]
    pub hops: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Val)]
    pub split: SplitName,
    /// Write metrics as CSV to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<PoolMode, String> {
    s.parse().map_err(|e: enadpool::Error| e.to_string())
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, files or data: exit code 2.
    Usage(String),
    /// Anything else: exit code 1.
    Internal(String),
}

impl From<enadpool::Error> for CliError {
    fn from(e: enadpool::Error) -> Self {
        use enadpool::Error as E;
        match e {
            E::Usage(_)
            | E::Config(_)
            | E::Input { .. }
            | E::Format { .. }
            | E::Data(_)
            | E::Checkpoint(_)
            | E::HopDimension { .. } => CliError::Usage(e.to_string()),
            E::Dimension { .. } | E::NonFinite(_) | E::Io(_) => CliError::Internal(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::InspectMasks(a) => commands::inspect_masks(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
