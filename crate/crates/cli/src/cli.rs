use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "hybridseq",
    version,
    about = "Hybrid LSTM-CRF sequence labeling"
)]
pub struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every output of the command.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with its lexicons and featurizer config.
    Synth(SynthArgs),
    /// Build a feature vocabulary and write sparse feature indices.
    Featurize(FeaturizeArgs),
    /// Train one model from a run config.
    Train(TrainArgs),
    /// Label a dataset with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Infer labels from redundant crowd annotations.
    Aggregate(AggregateArgs),
    /// Cross-validated random search over the penalty coefficients.
    Search(SearchArgs),
    /// Dump potentials split into their LSTM and hand-built parts.
    AnalyzePotentials(PotentialArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Task description (JSON).
    pub task: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub featurizer: PathBuf,
    /// Index against an existing vocabulary instead of building one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Run the full tune/train/evaluate protocol instead of a single training.
    #[arg(long)]
    pub protocol: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Featurizer config; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub featurizer: Option<PathBuf>,
    /// Defaults to `vocab.tsv` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Contextual vectors; defaults to the store recorded in the checkpoint.
    #[arg(long)]
    pub contextual: Option<PathBuf>,
    #[arg(long, default_value = "predictions.jsonl")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Which documents of a split gold file to score.
    #[arg(long, value_enum, default_value_t = Part::All)]
    pub part: Part,
    /// Baseline predictions for per-label relative improvements.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Position bucket width.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Also report approximate chunk F1.
    #[arg(long)]
    pub chunks: bool,
    /// Drop the background label from the macro average.
    #[arg(long)]
    pub exclude_other: bool,
    /// Write an SVG of the bucket curves.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// CSV with columns item_id, annotator_id, label.
    pub annotations: PathBuf,
    /// Comma-separated label set; defaults to the sorted labels in the file.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// CSV with columns item_id, label for agreement reporting.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1.0)]
    pub pseudo_count: f64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct PotentialArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[arg(long)]
    pub featurizer: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub contextual: Option<PathBuf>,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    All,
    Train,
    Test,
}
