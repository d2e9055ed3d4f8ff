//! `cyclecast`: simulate → prepare → train → evaluate → explain.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "cyclecast", version, about = "Cycle-level pregnancy prediction from tracking logs")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML or JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort: logs, profiles and a separate truth file.
    Simulate(SimulateArgs),
    /// Filter, label, split and encode logs into a dataset directory.
    Prepare(PrepareArgs),
    /// Train one model (or a grid from the config file) and write a checkpoint.
    Train(TrainArgs),
    /// Score a split with one or more checkpoints: AUC and decile stratification.
    Evaluate(EvaluateArgs),
    /// Day-resolved perturbation trend of one feature.
    Explain(ExplainArgs),
    /// Finite-difference gradient check of the model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProcessArg {
    Bms,
    Ttp,
    Ettp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Logistic,
    Lstm,
    Bms,
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed.
    #[arg(long)]
    pub seed: u64,
    /// Number of users [default: 1000, or the config's world.n_users].
    #[arg(long)]
    pub users: Option<usize>,
    /// Outcome process.
    #[arg(long, value_enum, default_value = "bms")]
    pub process: ProcessArg,
    /// Log file format.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Log file (CSV or JSONL, optionally gzip-compressed).
    #[arg(long)]
    pub logs: PathBuf,
    /// Profile CSV `user_id,age,birth_control`.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Schema file from an earlier run (fixes the birth-control list).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Seed of the user-level split [default: 0].
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Minimum logs per user [default: 300].
    #[arg(long)]
    pub min_logs: Option<usize>,
    /// Attach 180-day histories (required by the embedding model).
    #[arg(long)]
    pub history: bool,
    /// Abort on the first malformed line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug, Default)]
pub struct HyperArgs {
    /// Learning rate [default: 0.003].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// LSTM hidden size [default: 32].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// LSTM layers [default: 1].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Embedding size of the history network [default: 16].
    #[arg(long)]
    pub embedding: Option<usize>,
    /// Balanced batch size [default: 64].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dropout rate [default: 0.1].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// L2 strength on weights [default: 1e-5].
    #[arg(long)]
    pub l2: Option<f64>,
    /// Maximum epochs [default: 60].
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 10].
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Training seed.
    #[arg(long)]
    pub seed: u64,
    /// Output directory for the checkpoint and report.
    #[arg(long)]
    pub out: PathBuf,
    /// Search the config file's `grid` section instead of a single setting.
    #[arg(long)]
    pub grid: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file; repeat to compare models.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Stratify users by their mean score instead of cycles.
    #[arg(long)]
    pub per_user: bool,
    /// Output JSON file with one result per checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the results table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary daily feature to perturb.
    #[arg(long, default_value = "sex:unprotected")]
    pub feature: String,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Bootstrap replicates for per-day standard errors (0 disables).
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV with one row per cycle day.
    #[arg(long)]
    pub out: PathBuf,
    /// Logistic checkpoint for the two-panel plot bundle.
    #[arg(long, requires = "bundle")]
    pub logistic: Option<PathBuf>,
    /// Output JSON of the plot bundle (all three sex features).
    #[arg(long, requires = "logistic")]
    pub bundle: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Model to check [default: all four].
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative-error tolerance [default: 1e-6 logistic, 1e-4 recurrent].
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Optional JSON report output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = config::RunConfig::load_or_default(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::Prepare(a) => commands::prepare(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Explain(a) => commands::explain(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
