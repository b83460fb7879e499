//! Command-line front end for self-guided masked autoencoder experiments.
//!
//! [`run`] parses arguments, resolves a [`RunConfig`] and dispatches to one
//! subcommand. Exit codes: 0 success, 1 usage or config error, 2 runtime
//! failure, 3 gradient check failure.

pub mod commands;
pub mod config;
pub mod dump;
pub mod source;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("gradient check failed: max relative error {0:e} exceeds 1e-5")]
    GradCheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::GradCheck(_) => 3,
        }
    }
}

impl From<sma_core::Error> for CliError {
    fn from(e: sma_core::Error) -> Self {
        match e {
            sma_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sma",
    version,
    about = "Self-guided masked autoencoder pretraining and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain on unlabeled data.
    Pretrain(Common),
    /// Fit a prediction head on labeled data.
    Finetune(Common),
    /// Score a fine-tuned checkpoint.
    Eval(Common),
    /// Write the masks a checkpoint samples for the first few inputs.
    MaskDump(Common),
    /// Time one-shot top-k masking against the iterative oracle.
    BenchTopk(Common),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(Common),
}

/// Options shared by every subcommand. Named flags override `--set`,
/// which overrides `--config`. A repeated flag keeps its last value.
#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct Common {
    /// Flat key=value file; a previous run's manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value assignment; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    attention: Option<String>,
    /// synthetic:<options>, a CSV path, or text:<path>.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Fine-tune a freshly initialized model instead of a checkpoint.
    #[arg(long)]
    scratch: bool,
    #[arg(long)]
    part: Option<String>,
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    inject_fault: Option<String>,
}

impl Common {
    fn pairs(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut pairs = match &self.config {
            Some(path) => config::read_config_file(path)?,
            None => Vec::new(),
        };
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("preset", &self.preset),
            ("attention", &self.attention),
            ("data", &self.data),
            ("mask", &self.mask),
            ("ratio", &self.ratio),
            ("steps", &self.steps),
            ("seed", &self.seed),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("part", &self.part),
            ("count", &self.count),
            ("inject_fault", &self.inject_fault),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        if self.scratch {
            pairs.push(("scratch".into(), "true".into()));
        }
        Ok(pairs)
    }
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    let (common, f): (Common, fn(&RunConfig, &mut dyn Write) -> Result<(), CliError>) = match command {
        Command::Pretrain(c) => (c, commands::pretrain),
        Command::Finetune(c) => (c, commands::finetune),
        Command::Eval(c) => (c, commands::eval),
        Command::MaskDump(c) => (c, commands::mask_dump),
        Command::BenchTopk(c) => (c, commands::bench_topk),
        Command::Gradcheck(c) => (c, commands::gradcheck),
    };
    let cfg = RunConfig::from_pairs(&common.pairs()?)?;
    f(&cfg, out)
}
