mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{
    DatasetCommand, EvalArgs, FinetuneArgs, InpaintArgs, MasksweepArgs, PretrainArgs, ServeArgs,
};
use crate::config::{CliConfig, Profile};

/// Few-shot concept fine-tuning and inpainting for toy catalog items.
#[derive(Debug, Parser)]
#[command(name = "dreampaint", version)]
struct Cli {
    /// JSON config file; flags win over its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hyperparameter profile (overrides the file's `profile`)
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic catalog, scenes, pretraining corpus, and manifest
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the base inpainting model on a scene corpus
    Pretrain(PretrainArgs),
    /// Masked fine-tuning of the base model on one catalog item
    Finetune(FinetuneArgs),
    /// Inpaint a masked region of an image
    Inpaint(InpaintArgs),
    /// Fidelity benchmark of concept checkpoints against title prompts
    Eval(EvalArgs),
    /// Fidelity as the mask grows past the item footprint
    Masksweep(MasksweepArgs),
    /// HTTP try-on service over a runs directory
    Serve(ServeArgs),
}

/// Bad command-line arguments.
#[derive(Debug)]
pub struct ArgError(pub String);

impl fmt::Display for ArgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ArgError {}

/// Malformed or unknown config keys.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Machine-readable code and exit status for a failure.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if cause.is::<ArgError>() {
            return ("E_ARGS", 2);
        }
        if cause.is::<ConfigError>() {
            return ("E_CONFIG", 2);
        }
        if let Some(e) = cause.downcast_ref::<dreampaint_core::Error>() {
            return if e.is_data_error() { ("E_DATA", 3) } else { ("E_NUMERIC", 4) };
        }
        if let Some(dreampaint_service::ServiceError::Core(e)) = cause.downcast_ref() {
            return if e.is_data_error() { ("E_DATA", 3) } else { ("E_NUMERIC", 4) };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return ("E_DATA", 3);
        }
    }
    ("E_INTERNAL", 4)
}

fn fail(code: &str, exit: u8, message: String) -> ExitCode {
    let line = serde_json::json!({ "code": code, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("E_ARGS", 2, e.to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, exit) = classify(&e);
            fail(code, exit, format!("{e:#}"))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(cli.profile, cli.config.as_deref())?;
    match cli.command {
        Command::Dataset(cmd) => commands::dataset(cmd, cfg),
        Command::Pretrain(args) => commands::pretrain(args, cfg),
        Command::Finetune(args) => commands::finetune(args, cfg),
        Command::Inpaint(args) => commands::inpaint(args),
        Command::Eval(args) => commands::eval(args, cfg),
        Command::Masksweep(args) => commands::masksweep(args, cfg),
        Command::Serve(args) => commands::serve(args),
    }
}
