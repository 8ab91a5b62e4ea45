use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "caire",
    version,
    about = "Train, evaluate and serve an empathetic chatbot"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file setting any flag; top-level keys apply to every
    /// subcommand, `[train]`-style tables to one. Command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a vocabulary file from corpora (.csv empathetic files, persona
    /// files or plain text).
    BuildVocab(BuildVocabArgs),
    /// Pretrain on persona-format dialogues (emotion objective off).
    PretrainPersona(PretrainArgs),
    /// Fine-tune on an empathetic-dialogues CSV.
    Train(TrainArgs),
    /// Report perplexity, BLEU and emotion accuracy on a CSV.
    Eval(EvalArgs),
    /// Terminal chat; one user message per line.
    Chat(ChatArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
    /// Refit a checkpoint on revised replies from a feedback log.
    FinetuneFeedback(FinetuneArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    /// Corpus files; `.csv` is read as empathetic dialogues, a file whose
    /// lines start with turn numbers as persona dialogues, anything else as
    /// one text per line.
    #[arg(long = "corpus", required = true, num_args = 1.., value_name = "FILE")]
    pub corpus: Vec<PathBuf>,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Drop tokens seen fewer times than this.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    /// Upper bound on vocabulary size, reserved tokens included.
    #[arg(long, default_value_t = 20000)]
    pub max_size: usize,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ModelArgs {
    /// Transformer blocks.
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,
    /// Attention heads per block.
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    /// Hidden width.
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    /// Feed-forward inner width.
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    /// Longest input in tokens.
    #[arg(long, default_value_t = 256)]
    pub n_positions: usize,
    /// Dropout on embeddings, attention and residual branches.
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f32,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct OptimArgs {
    /// Weight of the language-model loss.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Peak learning rate, decayed linearly to zero.
    #[arg(long, default_value_t = 6.25e-5)]
    pub lr: f64,
    /// Examples per optimizer step.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Passes over the training examples.
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Seed for initialization, shuffling, distractors and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adam first-moment decay.
    #[arg(long, default_value_t = 0.9)]
    pub adam_beta1: f64,
    /// Adam second-moment decay.
    #[arg(long, default_value_t = 0.999)]
    pub adam_beta2: f64,
    /// Adam denominator epsilon.
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ContextArgs {
    /// One persona sentence per line; defaults to the built-in persona.
    #[arg(long, value_name = "FILE")]
    pub persona_file: Option<PathBuf>,
    /// Dialogue utterances kept as context.
    #[arg(long, default_value_t = 3)]
    pub history_window: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dialogue data file.
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary file from `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Validation CSV; its perplexity is logged every epoch.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Hold out a seeded 10% of conversations for validation (and 10% for
    /// test, unused) when no --valid file is given.
    #[arg(long)]
    pub split: bool,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Epoch log, one JSON object per line. Defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics_log: Option<PathBuf>,
    /// Disable the language-model objective.
    #[arg(long)]
    pub no_lm: bool,
    /// Disable the response-selection objective.
    #[arg(long)]
    pub no_selection: bool,
    /// Disable the emotion objective.
    #[arg(long)]
    pub no_emotion: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub context: ContextArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Persona-format dialogue file.
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary file from `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Empathetic CSV whose labels size the emotion head for later
    /// fine-tuning.
    #[arg(long)]
    pub labels_from: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Epoch log, one JSON object per line. Defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics_log: Option<PathBuf>,
    /// Disable the response-selection objective.
    #[arg(long)]
    pub no_selection: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dialogue utterances kept as context.
    #[arg(long, default_value_t = 3)]
    pub history_window: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    Greedy,
    TopK,
    Nucleus,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct DecodeArgs {
    /// Decoding strategy.
    #[arg(long, value_enum, default_value_t = StrategyArg::TopK)]
    pub strategy: StrategyArg,
    /// Candidates kept by top-k sampling.
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    /// Probability mass kept by nucleus sampling.
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    /// Softmax temperature for sampling.
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    /// Longest generated reply in tokens.
    #[arg(long, default_value_t = 40)]
    pub max_new_tokens: usize,
    /// Sampling seed.
    #[arg(long = "decode-seed", default_value_t = 0)]
    pub decode_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary file from `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Dialogue data file.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Longest generated reply in tokens.
    #[arg(long, default_value_t = 40)]
    pub max_new_tokens: usize,
    #[command(flatten)]
    pub context: ContextArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ChatArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary file from `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub context: ContextArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary file from `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port to bind; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Inference worker threads.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Requests allowed to wait for a worker before 503.
    #[arg(long, default_value_t = 64)]
    pub queue_capacity: usize,
    /// Feedback log (JSON lines) for reports and edits.
    #[arg(long, default_value = "feedback.jsonl")]
    pub feedback: PathBuf,
    /// Directory served for every non-API path.
    #[arg(long = "static", value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
    /// Restore sessions from and save them to this file on shutdown.
    #[arg(long)]
    pub session_snapshot: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub context: ContextArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary file from `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Feedback log written by `serve`.
    #[arg(long)]
    pub feedback: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Only use records at or after this Unix time in milliseconds.
    #[arg(long)]
    pub since: Option<u64>,
    /// Also train response selection against the other revised replies.
    #[arg(long)]
    pub with_selection: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
}
