use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lcg_core::eval::Benchmark;
use lcg_core::objectives::ObjectiveKind;
use lcg_core::train::Ablation;

#[derive(Debug, Parser)]
#[command(name = "lcg", version, about = "Train and evaluate lexically grounded language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Byte-pair tokenizer utilities.
    Tokenizer {
        #[command(subcommand)]
        action: TokenizerCommand,
    },
    /// Synthetic world generation.
    Synth {
        #[command(subcommand)]
        action: SynthCommand,
    },
    /// Train one model from an experiment config.
    Train(TrainArgs),
    /// Select λ_u for mixed training by validation perplexity.
    Sweep(SweepArgs),
    /// Run one benchmark on a checkpoint.
    Eval(EvalArgs),
    /// Compare two checkpoints by word concreteness.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCommand {
    /// Learn merges from a text corpus.
    Train(TokenizerTrainArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate datasets, benchmarks and a tokenizer for one world.
    Gen(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World settings (TOML); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Tokenizer vocabulary size.
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn parse_objective(s: &str) -> Result<ObjectiveKind, String> {
    s.parse().map_err(|e: lcg_core::objectives::ObjectiveError| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: lcg_core::train::TrainError| e.to_string())
}

fn parse_benchmark(s: &str) -> Result<Benchmark, String> {
    s.parse().map_err(|e: lcg_core::eval::EvalError| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Replace the objective, with its attention preset.
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<ObjectiveKind>,
    /// Apply a named ablation after the objective.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ungrounded loss weight for the mixed scenario.
    #[arg(long)]
    pub lambda_u: Option<f64>,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// End this invocation once this many epochs are complete; the
    /// schedule still spans the configured epochs.
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated candidates; the config grid when omitted.
    #[arg(long, value_delimiter = ',')]
    pub lambda_u_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<ObjectiveKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TextSplit {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// relatedness, features, relations, context or perplexity.
    #[arg(long, value_parser = parse_benchmark)]
    pub benchmark: Benchmark,
    /// Directory written by `synth gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `tokenizer.json` in the data directory.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out text used by the perplexity benchmark.
    #[arg(long, value_enum, default_value_t = TextSplit::Test)]
    pub split: TextSplit,
    /// Seed of the random benchmark splits.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Reference checkpoint.
    #[arg(long)]
    pub a: PathBuf,
    /// Comparison checkpoint; differences are `NLL_b − NLL_a`.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub concreteness: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `tokenizer.json` next to the text file.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Word pairs with reference scores for the human-likeness regression.
    #[arg(long)]
    pub relatedness: Option<PathBuf>,
}
