//! Command-line pipeline: generate data, train, decode, evaluate and
//! summarize copy lengths, all driven by one flat run configuration.

pub mod commands;
pub mod config;
pub mod records;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use spanedit::Error;

pub use config::RunConfig;

/// Exit status when arguments cannot be parsed.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "spanedit", version, about = "Train and run span-copying sequence editors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` run configuration; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub task: Option<String>,
    #[arg(long, global = true)]
    pub count: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    #[arg(long, global = true, value_name = "marginal|multi_hot|longest_copy")]
    pub objective: Option<String>,
    #[arg(long, global = true, value_name = "greedy|beam_merged|beam_merge_at_end")]
    pub decoder: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub beam_size: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub max_len: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<String>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<String>,
    /// Sets any configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus split into train, valid and test files.
    GenData,
    /// Train a model on the train split, validating on the valid split.
    Train,
    /// Decode a split with a trained model.
    Decode,
    /// Score a decode file against the gold outputs.
    Eval,
    /// Write the copy-length histogram of greedy decoding as CSV.
    Stats,
    /// Print the resolved configuration.
    Config,
}

fn io_error(path: PathBuf, source: std::io::Error) -> Error {
    Error::Io { path, source }
}

/// Defaults, then the config file, then `--set`, then the named flags.
pub fn resolve(cli: &Cli) -> spanedit::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path.clone(), e))?;
        cfg.apply_text(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Validation(format!("{}: line {line}: {message}", path.display())),
            other => other,
        })?;
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set {kv:?}: expected KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    let named = [
        ("task", &cli.task),
        ("count", &cli.count),
        ("seed", &cli.seed),
        ("objective", &cli.objective),
        ("decoder", &cli.decoder),
        ("beam_size", &cli.beam_size),
        ("max_len", &cli.max_len),
        ("threads", &cli.threads),
        ("out", &cli.out),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    for (k, v) in overrides {
        cfg.set(&k, &v)
            .map_err(|m| Error::Validation(format!("option `{k}`: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Parse { .. } | Error::Validation(_) | Error::TooLarge(_) => EXIT_VALIDATION,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::Autodiff(_) | Error::Internal(_) => EXIT_USAGE,
    }
}

fn dispatch(cli: &Cli) -> spanedit::Result<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train_model(&cfg),
        Command::Decode => commands::decode(&cfg),
        Command::Eval => {
            let report = commands::evaluate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
            Ok(())
        }
        Command::Stats => {
            let (stats, path) = commands::stats(&cfg)?;
            log::info!("wrote {}", path.display());
            println!(
                "copies {} mean {:.3} median {:.1} single-token fraction {:.3}",
                stats.copies, stats.mean, stats.median, stats.single_token_fraction
            );
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPANEDIT_LOG", "info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
