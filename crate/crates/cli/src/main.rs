//! `synemb`: train and evaluate syntactic sentence embeddings.
//!
//! Subcommands cover the whole pipeline: generating synthetic corpora,
//! learning a joint BPE vocabulary, training and fine-tuning the
//! encoder-decoder, exporting embeddings, and scoring embedding spaces.
//! Every command records a replayable manifest next to its primary output.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use synemb_core::CoreError;

/// Failure with a process exit code: 2 for bad input or usage, 1 for
/// internal faults.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        Self {
            code: if e.is_user_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "synemb", version, about = "Syntactic sentence embeddings toolkit")]
pub struct Cli {
    /// Seed for all randomness in this command.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Worker cap for parallelizable evaluation steps.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Key=value file mirroring this command's flags (expanded before
    /// parsing; conflicting values abort).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Learn a joint BPE vocabulary from the source column of pairs TSVs.
    LearnBpe(LearnBpeArgs),
    /// Train a model from scratch on parallel pairs.
    Train(TrainArgs),
    /// Continue training a checkpoint on new pairs (transfer).
    Finetune(FinetuneArgs),
    /// Write sentence embeddings in the external embedding format.
    Embed(EmbedArgs),
    /// Nearest-neighbour group accuracy over an evaluation set.
    EvalNn(EvalNnArgs),
    /// Functional dissimilarity over a CoNLL-U treebank sample.
    EvalFd(EvalFdArgs),
    /// Generate synthetic parallel pairs from a grammar.
    GenPairs(GenPairsArgs),
    /// Generate a grouped evaluation set from a grammar.
    GenEval(GenEvalArgs),
    /// Re-run a recorded manifest and byte-compare the artifacts.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct LearnBpeArgs {
    /// Pairs TSV file(s); the source-text column feeds BPE learning.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optimization knobs shared by train and finetune.
#[derive(Args, Debug, Serialize)]
pub struct TrainKnobs {
    #[arg(long, default_value_t = 1000)]
    pub max_steps: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Validate on the holdout every N steps; 0 disables validation.
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 0.05)]
    pub holdout_frac: f64,
    /// Source-length bucket width in BPE pieces; 0 disables bucketing.
    #[arg(long, default_value_t = 4)]
    pub bucket_width: usize,
    #[arg(long)]
    pub no_shuffle: bool,
    /// Minimum whitespace tokens per source sentence.
    #[arg(long, default_value_t = 3)]
    pub min_words: usize,
}

/// Architecture dimensions.
#[derive(Args, Debug, Serialize)]
pub struct ModelKnobs {
    #[arg(long, default_value_t = 100)]
    pub bpe_emb_dim: usize,
    #[arg(long, default_value_t = 100)]
    pub upos_emb_dim: usize,
    #[arg(long, default_value_t = 20)]
    pub lang_emb_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 128)]
    pub enc_fwd_hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub enc_bwd_hidden: usize,
    #[arg(long, default_value_t = 512)]
    pub dec_hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub pairs: Vec<PathBuf>,
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Progress JSONL path; defaults to `<out>.progress.jsonl`.
    #[arg(long)]
    pub progress: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    #[command(flatten)]
    pub model: ModelKnobs,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Number of pairs to use after filtering; 0 writes a zero-shot
    /// passthrough checkpoint.
    #[arg(long)]
    pub budget: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub progress: Option<PathBuf>,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[command(flatten)]
    pub knobs: TrainKnobs,
}

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
    /// Sentence file: eval-set JSONL, `iso<TAB>text` lines, or plain text
    /// (plain text needs --lang).
    #[arg(long)]
    pub sentences: PathBuf,
    /// ISO code for plain-text sentence files.
    #[arg(long)]
    pub lang: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["embeddings", "checkpoint"])))]
pub struct EvalNnArgs {
    /// External embedding file (`id<TAB>v1 v2 ...`).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint to embed the evaluation sentences with.
    #[arg(long, requires = "bpe")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long)]
    pub eval_set: PathBuf,
    /// Neighbourhood sizes; repeatable.
    #[arg(long = "k", default_values_t = [1usize, 5])]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["embeddings", "checkpoint"])))]
pub struct EvalFdArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, requires = "bpe")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long)]
    pub conllu: PathBuf,
    /// ISO code of the treebank language.
    #[arg(long)]
    pub lang: String,
    #[arg(long, value_enum, default_value_t = commands::FdConventionArg::Similarity)]
    pub fd_convention: commands::FdConventionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GenPairsArgs {
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long)]
    pub src: String,
    #[arg(long)]
    pub tgt: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GenEvalArgs {
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub groups: usize,
    #[arg(long)]
    pub per_group: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where replayed artifacts go; defaults to a fresh temp directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// What a command touched; drives manifest writing.
pub struct RunOutput {
    pub primary: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub logs: Vec<PathBuf>,
}

/// Parses and executes one effective argument vector (no binary name).
/// Writes a manifest next to the primary output of artifact-producing
/// commands; replay produces none itself.
pub fn dispatch(raw_argv: &[String]) -> Result<(), CliError> {
    let argv = config::expand_config_args(raw_argv)?;
    let mut full = vec!["synemb".to_string()];
    full.extend(argv.iter().cloned());
    let cli = match Cli::try_parse_from(&full) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap renders its own message; usage errors exit 2.
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            if code == 0 {
                return Ok(());
            }
            return Err(CliError {
                code,
                message: String::new(),
            });
        }
    };

    let started = Instant::now();
    let command_name = match &cli.command {
        Cmd::LearnBpe(_) => "learn-bpe",
        Cmd::Train(_) => "train",
        Cmd::Finetune(_) => "finetune",
        Cmd::Embed(_) => "embed",
        Cmd::EvalNn(_) => "eval-nn",
        Cmd::EvalFd(_) => "eval-fd",
        Cmd::GenPairs(_) => "gen-pairs",
        Cmd::GenEval(_) => "gen-eval",
        Cmd::Replay(_) => "replay",
    };

    let outcome = match &cli.command {
        Cmd::LearnBpe(args) => Some(commands::learn_bpe(&cli, args)?),
        Cmd::Train(args) => Some(commands::train(&cli, args)?),
        Cmd::Finetune(args) => Some(commands::finetune(&cli, args)?),
        Cmd::Embed(args) => Some(commands::embed(&cli, args)?),
        Cmd::EvalNn(args) => Some(commands::eval_nn(&cli, args)?),
        Cmd::EvalFd(args) => Some(commands::eval_fd(&cli, args)?),
        Cmd::GenPairs(args) => Some(commands::gen_pairs(&cli, args)?),
        Cmd::GenEval(args) => Some(commands::gen_eval(&cli, args)?),
        Cmd::Replay(args) => {
            commands::replay(args)?;
            None
        }
    };

    if let Some(run) = outcome {
        let mut inputs = Vec::new();
        for p in &run.inputs {
            inputs.push(manifest::stamp(p)?);
        }
        let mut outputs = Vec::new();
        for p in &run.outputs {
            outputs.push(manifest::stamp(p)?);
        }
        let m = manifest::RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command_name.to_string(),
            argv: argv.clone(),
            seed: cli.seed,
            inputs,
            outputs,
            logs: run.logs.iter().map(|p| p.display().to_string()).collect(),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        manifest::write_manifest(&m, &run.primary)?;
    }
    Ok(())
}

fn main() {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&raw) {
        Ok(()) => {}
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            std::process::exit(e.code);
        }
    }
}
