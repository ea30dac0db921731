//! Command-line pipeline: data generation and ingestion, tagging, indexing,
//! demonstration retrieval, base-model and shift-vector training, inference,
//! evaluation, probes and runtime benchmarks.
//!
//! Every command reads and writes only the artifacts named by its flags (or
//! the `[paths]` section of the config file) and prints a one-line JSON
//! summary on success. Failures surface as a one-line JSON object on stderr.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use commands::{read_predictions, run, BenchRow, Prediction, BENCH_K};

#[derive(Debug, Parser)]
#[command(name = "cogshift", version, about = "Shift-vector distillation pipeline for meme interventions")]
pub struct Cli {
    /// Pipeline config file (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clustered corpus.
    Synth(SynthArgs),
    /// Validate a corpus file, optionally re-split it, and write it back out.
    Ingest(IngestArgs),
    /// Train the commonsense tagger on the training split.
    TagTrain(TagTrainArgs),
    /// Predict commonsense parameters for corpus records.
    Tag(TagArgs),
    /// Build the image-feature index over the training split.
    Index(IndexArgs),
    /// Retrieve demonstrations for every anchor.
    IclBuild(IclBuildArgs),
    /// Train the base model.
    LmTrain(LmTrainArgs),
    /// Distil demonstrations into shift vectors.
    TrainCsv(TrainCsvArgs),
    /// Generate interventions.
    Infer(InferArgs),
    /// Score predictions against reference interventions.
    Evaluate(EvaluateArgs),
    /// Hidden-state geometry probes.
    Probe(ProbeArgs),
    /// Prompt length and wall-clock time per demonstration count.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Random,
    Commonsense,
    Image,
    Combined,
}

impl From<StrategyArg> for cogshift::retrieval::Strategy {
    fn from(s: StrategyArg) -> Self {
        use cogshift::retrieval::Strategy;
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Commonsense => Strategy::Commonsense,
            StrategyArg::Image => Strategy::Image,
            StrategyArg::Combined => Strategy::Combined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferMode {
    /// Trained shift with tagger (or provided) commonsense.
    Full,
    /// Trained shift, no commonsense in the prompt.
    NoCs,
    /// Trained shift, randomly drawn commonsense.
    RandomCs,
    /// Shift vectors with every coefficient set to 1.
    Alpha1,
    /// Unshifted model with k retrieved demonstrations.
    Kshot,
}

/// Retrieval flags shared by the commands that select demonstrations.
#[derive(Debug, Clone, Args)]
pub struct RetrievalArgs {
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub c: Option<usize>,
    /// Accept a k outside the evaluated grid.
    #[arg(long)]
    pub any_k: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d_img: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus file to write; defaults to `paths.corpus`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Re-split into train/test with this training share.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write corpus statistics as JSON.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TagTrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub d_text: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub tagger: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IclBuildArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Prebuilt index over the training split; built in memory when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Which records act as anchors. Demonstrations always come from the training split.
    #[arg(long, value_enum, default_value = "train")]
    pub anchors: SplitArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LmTrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the per-step loss history as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCsvArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Demonstration sets from `icl-build`; retrieved in memory when absent.
    #[arg(long)]
    pub icl: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the per-epoch loss breakdown as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Tagger for the full and alpha1 modes; the records' own labels are used without it.
    #[arg(long)]
    pub tagger: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: InferMode,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock seconds per prediction (otherwise null, keeping output reproducible).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Corpus holding the reference interventions.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Model whose embeddings score semantic similarity.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Predictions to test against (Mann-Whitney on semantic similarity).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Shift vectors to apply; the unshifted model is probed without them.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub top_pairs: Option<usize>,
    /// Category left out of the within/between groups (repeatable).
    #[arg(long)]
    pub skip: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failures detected by the command layer before any library call.
#[derive(Debug, thiserror::Error)]
pub enum UsageError {
    #[error("{}: {message}", path.display())]
    MissingArtifact { path: PathBuf, message: String },
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    Argument(String),
}

/// The one-line JSON error object printed on failure.
pub fn error_line(err: &anyhow::Error) -> String {
    let mut value = json!({ "status": "error", "kind": "error", "message": format!("{err:#}") });
    if let Some(usage) = err.downcast_ref::<UsageError>() {
        match usage {
            UsageError::MissingArtifact { path, .. } => {
                value["kind"] = json!("missing_artifact");
                value["path"] = json!(path);
            }
            UsageError::Config { field, .. } => {
                value["kind"] = json!("config");
                value["field"] = json!(field);
            }
            UsageError::Argument(_) => value["kind"] = json!("argument"),
        }
    } else if let Some(e) = err.chain().find_map(|e| e.downcast_ref::<cogshift::Error>()) {
        value["kind"] = json!(e.kind());
        if let cogshift::Error::Io { path, .. } | cogshift::Error::Checkpoint { path, .. } = e {
            value["path"] = json!(path);
        }
    }
    value.to_string()
}
