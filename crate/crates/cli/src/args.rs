// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "swea", version, about = "Edit facts in a toy transformer by altering subject word embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fact corpus and counterfactual edit requests.
    Corpus(CorpusArgs),
    /// Pretrain the toy language model on a corpus.
    Train(TrainArgs),
    /// Fuse editing embeddings for a request file into a store.
    Edit(EditArgs),
    /// Evaluate efficacy, generalization and specificity.
    Eval(EvalArgs),
    /// Show attribution scores and selected dimensions for one fact.
    Attribute(AttributeArgs),
    /// Sweep the suppression strength or the KED threshold.
    Sweep(SweepArgs),
    /// Re-run a command from its manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long, default_value_t = 200)]
    pub facts: usize,
    /// Number of edit requests to draw from the edit pool.
    #[arg(long, default_value_t = 50)]
    pub requests: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (corpus.jsonl, requests.jsonl, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Fact corpus in JSON Lines.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory (model.toylm, vocab.txt, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Fusion hyperparameters; unset flags fall back to the config file, then
/// to the built-in defaults.
#[derive(Debug, Default, Args)]
pub struct FusionFlags {
    /// TOML file with a [fusion] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long = "t")]
    pub t_threshold: Option<f64>,
    /// Riemann steps for attribution.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clamp: Option<f64>,
    /// Number of sampled context prefixes.
    #[arg(long)]
    pub prefixes: Option<usize>,
    #[arg(long)]
    pub prefix_length: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Directory holding model.toylm and vocab.txt.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub requests: PathBuf,
    #[arg(long)]
    pub store_out: PathBuf,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Batch,
    Sequential,
    SequentialBatch,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Store to evaluate in batch mode. Without it the unedited model is evaluated.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub requests: PathBuf,
    /// Writes <prefix>.json and <prefix>.csv.
    #[arg(long)]
    pub report_out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Batch)]
    pub mode: Mode,
    /// Stage sizes for sequential-batch mode, e.g. "10x2".
    #[arg(long)]
    pub schedule: Option<String>,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub subject: String,
    #[arg(long)]
    pub object: String,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 0.35)]
    pub t: f64,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Gamma,
    T,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub requests: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values, e.g. "0,0.25,0.5,1".
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Writes <prefix>.csv and <prefix>.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory receiving the replayed outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
}
