//! `psgalign`: synthetic data, ingestion, pre-training and evaluation from the shell.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 non-finite training loss.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psgalign::pretrain::PretrainError;

/// Bad flags, config keys or config values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "psgalign", version, about = "Multimodal sleep-signal alignment workflow")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Directory receiving every output of the run.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true, env = "S2V_SEED")]
    pub seed: Option<u64>,
    /// Config override `section.key=value`; repeatable, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled corpus.
    GenSynth(commands::GenSynthArgs),
    /// Read EDF files into an unnormalized corpus.
    Ingest(commands::IngestArgs),
    /// Fit per-modality normalization statistics on the pretrain split.
    Stats(commands::StatsArgs),
    /// Normalize a corpus with fitted statistics.
    Prepare(commands::PrepareArgs),
    /// Contrastive pre-training.
    Pretrain(commands::PretrainArgs),
    /// LoRA fine-tuning for 5-class sleep staging.
    Finetune(commands::FinetuneArgs),
    /// Night-level probe on the labels' binary targets.
    Evaluate(commands::EvaluateArgs),
    /// Cross-modal recall@1 matrix.
    Retrieve(commands::RetrieveArgs),
    /// Verify run manifests and summarize results.
    Report(commands::ReportArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        match cause.downcast_ref::<PretrainError>() {
            Some(PretrainError::NonFiniteLoss { .. }) => return 3,
            Some(PretrainError::InvalidConfig(_)) => return 1,
            _ => {}
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
