//! `taxoseq`: train, evaluate and inspect hierarchical label-sequence
//! classifiers.
//!
//! Config precedence, lowest to highest: built-in defaults, `--config`
//! file, `--set section.key=value` overrides in order, then dedicated flags
//! such as `--seed` or `--beam`.

mod ablate;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "taxoseq",
    version,
    about = "Hierarchical text classification as label-sequence generation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run seed; overrides `train.seed` (and the generator seed for gen-synth).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution, for bit-identical reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads (default: all cores). Ignored with --deterministic.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML run config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset directory, then evaluate the best checkpoint on
    /// the test split.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Predict label sets for a JSONL file of `{id, text}` records.
    Predict(PredictArgs),
    /// Train the base config and each named variant with shared seeds and
    /// tabulate Micro/Macro-F1.
    Ablate(AblateArgs),
    /// Write a synthetic corpus (taxonomy plus train/dev/test JSONL).
    GenSynth(GenSynthArgs),
    /// Print label and split statistics for a dataset directory.
    Stats(StatsArgs),
    /// Convert a raw public corpus into the dataset layout.
    Adapt(AdaptArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory with taxonomy.tsv and {train,dev,test}.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Output subdirectory under --out; defaults to the dataset name.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Validation loss used for scheduling: the training loss or plain CE.
    #[arg(long, value_enum)]
    pub val_loss: Option<ValLossArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ValLossArg {
    Training,
    PlainCe,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory (e.g. out/<run>/best).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Average Macro-F1 over every hierarchy label.
    #[arg(long)]
    pub macro_all_labels: bool,
    /// Report directory; defaults to the checkpoint's parent.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL input; `id` defaults to the line number when absent.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directories; one result column pair per dataset.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Variant keys, comma-separated. `list` prints the known keys.
    #[arg(long, value_delimiter = ',', default_value = "base,shuffled")]
    pub variants: Vec<String>,
    /// Label-embedding directory for the label-semantics variant.
    #[arg(long)]
    pub label_init: Option<PathBuf>,
    /// Variants trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, default_value = "ablation")]
    pub run_name: String,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub dest: PathBuf,
    /// TOML generator config; flags below override it.
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<u32>,
    #[arg(long)]
    pub branching: Option<u32>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub docs_per_leaf: Option<usize>,
    #[arg(long)]
    pub total_docs: Option<usize>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub signal_strength: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Emit JSON instead of the one-line summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long, value_enum)]
    pub format: FormatArg,
    /// Directory holding the raw corpus files.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub dest: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Wos,
    Nyt,
    Rcv1,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
