//! `ieci` — reproducible corpus generation, training, evaluation, and
//! ablation runs for weakly-supervised phrase grounding.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use ieci_core::corpus::CorpusError;
use ieci_core::eval::EvalError;
use ieci_core::model::{Ablation, ModelError};
use ieci_core::tensor::TensorError;
use ieci_core::training::TrainError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gradient check failed: max relative error {worst:.3e} >= tolerance {tolerance:.1e}")]
    GradcheckFailed { worst: f64, tolerance: f64 },
    #[error("negative control detected the injected wrong gradient (error {0:.3e})")]
    NegativeControlDetected(f64),
    #[error("negative control FAILED: the harness missed the injected wrong gradient (error {0:.3e})")]
    NegativeControlMissed(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::NonFiniteLoss { .. }) => EXIT_NUMERICAL,
            CliError::Tensor(TensorError::NonFinite { .. }) => EXIT_NUMERICAL,
            CliError::Train(TrainError::Tensor(TensorError::NonFinite { .. })) => EXIT_NUMERICAL,
            CliError::GradcheckFailed { .. } => EXIT_NUMERICAL,
            CliError::NegativeControlDetected(_) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ieci", version, about = "Weakly-supervised phrase grounding toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic grounding corpus with planted gold alignments.
    Synth(SynthArgs),
    /// Train a grounding model and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Evaluate a checkpoint: stratified Recall@k report and ranking dump.
    Eval(EvalArgs),
    /// Train and evaluate all four ablations across seeds.
    Ablate(AblateArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for manifest.json and features.bin.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train_pairs: usize,
    #[arg(long, default_value_t = 50)]
    pub val_pairs: usize,
    #[arg(long, default_value_t = 50)]
    pub test_pairs: usize,
    /// Phrases per sentence.
    #[arg(long, default_value_t = 4)]
    pub phrases: usize,
    /// Regions per image.
    #[arg(long, default_value_t = 12)]
    pub regions: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Fraction of phrases that require implicit reasoning.
    #[arg(long, default_value_t = 0.1)]
    pub implicit_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    /// Size of the confounding-context pool.
    #[arg(long, default_value_t = 48)]
    pub context_clusters: usize,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Corpus manifest.json path.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for the checkpoint and loss history.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file with training keys (CLI flags win).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Attention layers per stack.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Codebook entries per modality.
    #[arg(long, default_value_t = 48)]
    pub dict_size: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Also apply the image-to-sentence direction of the contrastive loss.
    #[arg(long, default_value_t = false)]
    pub symmetric: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus manifest.json path.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for report files and the prediction dump.
    #[arg(long)]
    pub out: PathBuf,
    /// Which pairs/annotations to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Recall cutoffs, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5])]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Seeds to repeat each ablation over, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub dict_size: usize,
    #[arg(long, default_value_t = 2)]
    pub phrases: usize,
    #[arg(long, default_value_t = 3)]
    pub regions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Optional directory for the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Inject a wrong backward rule; the check must catch it (nonzero exit).
    #[arg(long, default_value_t = false)]
    pub negative_control: bool,
}

/// Ablation choice as a CLI value; names match the checkpoint tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum AblationArg {
    Full,
    NoIda,
    NoIci,
    NoBoth,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Ablation {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoIda => Ablation::NoIda,
            AblationArg::NoIci => Ablation::NoIci,
            AblationArg::NoBoth => Ablation::NoBoth,
        }
    }
}

/// Evaluation pool: a corpus split, or a test-split annotation stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
    Implicit,
    Explicit,
    Full,
}

impl SplitArg {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::Implicit => "implicit",
            SplitArg::Explicit => "explicit",
            SplitArg::Full => "full",
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => commands::cmd_synth(&args),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::Ablate(args) => commands::cmd_ablate(&args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(&args),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
