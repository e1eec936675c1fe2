//! `resroute` command-line tool. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::Value;

pub mod commands;
pub mod error;
pub mod manifest;
pub mod settings;

pub use error::CliError;
pub use manifest::RunManifest;
pub use settings::ToolConfig;

#[derive(Debug, Parser)]
#[command(name = "resroute", version, about = "Query-aware input resolution routing for vision-language models")]
pub struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "info", value_parser = ["error", "warn", "info", "debug", "trace"])]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, simulator spec and features.
    Simulate(commands::simulate::Args),
    /// Roll out the target model over the menu and label sufficiency.
    Label(commands::label::Args),
    /// Train a selector head on labeled samples with features.
    Train(commands::train::Args),
    /// Print the selected resolution for one feature vector or image.
    Select(commands::select::Args),
    /// Route a dataset through the selector and score the answers.
    Eval(commands::eval::Args),
    /// Summarize evaluation runs against the native-resolution baseline.
    Report(commands::report::Args),
    /// Run the routing gateway.
    Serve(commands::serve::Args),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Label(_) => "label",
            Command::Train(_) => "train",
            Command::Select(_) => "select",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
            Command::Serve(_) => "serve",
        }
    }
}

/// Everything a subcommand needs besides its own arguments.
pub struct Context {
    pub config: ToolConfig,
    pub config_path: Option<PathBuf>,
    /// `--seed`, else the file's top-level `seed`, else 0.
    pub seed: u64,
    explicit_seed: Option<u64>,
    pub argv: Vec<String>,
}

impl Context {
    pub fn new(config: ToolConfig, config_path: Option<PathBuf>, seed: Option<u64>, argv: Vec<String>) -> Self {
        let explicit_seed = seed.or(config.seed);
        Context { config, config_path, seed: explicit_seed.unwrap_or(0), explicit_seed, argv }
    }

    /// The seed for a section that has its own: an explicit global seed wins.
    pub fn seed_or(&self, section_seed: u64) -> u64 {
        self.explicit_seed.unwrap_or(section_seed)
    }
}

fn init_logging(level: &str) {
    let level: tracing::Level = level.parse().unwrap_or(tracing::Level::INFO);
    // a second call in the same process (tests) keeps the first subscriber
    let _ = tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .try_init();
}

/// Runs a parsed command to completion and returns its summary.
pub fn execute(cli: Cli, argv: Vec<String>) -> Result<Value, CliError> {
    let config = match &cli.config {
        Some(p) => ToolConfig::load(p)?,
        None => ToolConfig::default(),
    };
    config.validate()?;
    let ctx = Context::new(config, cli.config.clone(), cli.seed, argv);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("tokio runtime: {e}")))?;
    runtime.block_on(async move {
        match cli.command {
            Command::Simulate(a) => commands::simulate::run(&ctx, a),
            Command::Label(a) => commands::label::run(&ctx, a).await,
            Command::Train(a) => commands::train::run(&ctx, a),
            Command::Select(a) => commands::select::run(&ctx, a).await,
            Command::Eval(a) => commands::eval::run(&ctx, a).await,
            Command::Report(a) => commands::report::run(&ctx, a),
            Command::Serve(a) => commands::serve::run(&ctx, a).await,
        }
    })
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code: 0 success, 1 validation error, 2 runtime or transport error.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(&cli.log_level);
    let command = cli.command.name();
    match execute(cli, argv) {
        Ok(summary) => {
            // a closed pipe (`| head`) is not a failure of the command
            let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            0
        }
        Err(e) => {
            tracing::error!(command, error = %e, "command failed");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
