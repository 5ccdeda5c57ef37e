mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mhsa_core::MhsaError;

/// Attention steering experiments on a synthetic vision-language surrogate.
#[derive(Parser, Debug)]
#[command(name = "mhsa", version, about)]
struct Cli {
    /// Worker threads for per-sample parallelism (0 = all cores).
    #[arg(long, global = true, env = "MHSA_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataMode {
    /// One yes/no question per sample.
    Disc,
    /// One record per caption token.
    Caption,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a surrogate attention store and its scene sidecar.
    GenData(GenDataArgs),
    /// Train the hallucination detector on raw attention.
    PretrainDetector(PretrainArgs),
    /// Train the steering generator jointly with the detector.
    Train(Box<TrainArgs>),
    /// Answer yes/no questions with and without correction.
    EvalPope(EvalPopeArgs),
    /// Re-decode captions with token-level correction.
    EvalCaption(EvalCaptionArgs),
    /// Layer and head statistics of saved corrections.
    Analyze(AnalyzeArgs),
    /// Latency breakdown of an evaluation run.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Preset (`qwen`, `internvl`, `llava`) or `L,H,N`.
    #[arg(long, default_value = "qwen")]
    pub shape: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0.5)]
    pub halluc_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "disc")]
    pub mode: DataMode,
    /// First sample (or scene) id; lets disjoint sets share a seed.
    #[arg(long, default_value_t = 0)]
    pub start_id: u64,
    /// Tokens per caption in caption mode.
    #[arg(long, default_value_t = 30)]
    pub caption_length: usize,
    /// Object whitelist, one lowercase name per line.
    #[arg(long)]
    pub whitelist: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Fraction of question ids used for training.
    #[arg(long, default_value_t = 0.8)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 42)]
    pub split_seed: u64,
    /// Train on every sample instead of the training split.
    #[arg(long)]
    pub no_split: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "disc")]
    pub mode: DataMode,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint stem of a pretrained detector; pretrained here when absent.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Named hyperparameter row: pope-qwen, pope-llava, pope-internvl, caption-qwen.
    #[arg(long, default_value = "pope-qwen")]
    pub preset: String,
    /// `key = value` file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda_dg: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub lambda_lvlm: Option<f64>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden_g: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `discriminative` or `caption_offline`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Apply the detector-guided loss to every sample.
    #[arg(long)]
    pub dg_on_all: bool,
    /// Keep the class balance of the training split as is.
    #[arg(long)]
    pub no_oversample: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub whitelist: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalPopeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
    /// Run detection but never correct.
    #[arg(long)]
    pub no_correct: bool,
    /// Write corrected tensors of flagged samples for `analyze`.
    #[arg(long)]
    pub save_corrections: bool,
    #[arg(long)]
    pub whitelist: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalCaptionArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Scene sidecar written by `gen-data --mode caption`.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub whitelist: Option<PathBuf>,
    #[arg(long)]
    pub no_correct: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Store with the uncorrected attention.
    #[arg(long)]
    pub data: PathBuf,
    /// `corrections.attnstore` from `eval-pope --save-corrections`.
    #[arg(long)]
    pub corrections: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `records.jsonl` from `eval-pope`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Bad flags, configuration or missing inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<MhsaError>() {
        Some(MhsaError::Config(_) | MhsaError::Mode(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        log::warn!("thread pool already configured: {e}");
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::PretrainDetector(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(*a),
        Command::EvalPope(a) => commands::eval_pope(a),
        Command::EvalCaption(a) => commands::eval_caption(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
