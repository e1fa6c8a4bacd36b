//! Command-line front end: argument parsing, command implementations and
//! exit-code mapping.

pub mod ablate;
pub mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dipreg::io::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dipreg", version, about = "Deformable 3D registration with an untrained pyramidal network prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file of `key=value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one setting; may be repeated. Applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output directory (same as `--set out_dir=DIR`).
    #[arg(short, long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Log per-iteration progress.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic pair with ground-truth field and masks.
    Phantom,
    /// Register `moving` onto `fixed`.
    Register,
    /// Score a displacement (identity when none is given) against labeled masks.
    Eval {
        /// Method name written in the report's first column.
        #[arg(long)]
        label: Option<String>,
    },
    /// Check every operator gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = dipreg::autodiff::suite::SUITE_SEEDS)]
        seeds: u64,
    },
    /// Run the architecture and regularization variants on one pair.
    Ablate {
        /// Subset of variant ids, comma separated (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Export axial, coronal and sagittal overlays of fixed and warped volumes.
    Overlay,
}

/// Raised for bad command-line usage that is not a config parse error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Raised when a numerical check fails.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Maps an error chain to the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dipreg::Error>() {
            return match e {
                dipreg::Error::Config(_) => EXIT_USAGE,
                dipreg::Error::Divergence { .. } | dipreg::Error::Backward(_) => EXIT_NUMERIC,
                _ => EXIT_FORMAT,
            };
        }
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_FORMAT;
        }
    }
    EXIT_USAGE
}

/// Default config, then the config file, then `--set` overrides, then `--out`.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.apply(s)?;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg.resolve()?)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    commands::configure_threads(cfg.threads)?;
    match cli.command {
        Command::Phantom => commands::phantom(&cfg),
        Command::Register => commands::register(&cfg),
        Command::Eval { label } => commands::eval(&cfg, label.as_deref()),
        Command::Gradcheck { seeds } => commands::gradcheck(&cfg, seeds),
        Command::Ablate { variants } => commands::ablate(&cfg, &variants),
        Command::Overlay => commands::overlay(&cfg),
    }
}
