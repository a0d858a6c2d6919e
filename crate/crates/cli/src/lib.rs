//! Command-line driver: configuration loading, logging and the pipeline
//! subcommands.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::Parser;

pub use commands::{CliError, Command};
pub use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "caes", version, about = "Causal explanation scores for image classifiers")]
pub struct Cli {
    /// Subcommand to run.
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, short, env = "CAES_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set classifier.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Validate the configuration and print the plan without running it.
    #[arg(long)]
    pub dry_run: bool,
}

fn init_logging(run_id: &str) {
    let run_id = run_id.to_string();
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(move |buf, record| {
            writeln!(buf, "[{} {}] {}", record.level(), run_id, record.args())
        })
        .try_init();
}

/// Run the CLI and return its exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let cfg = match RunConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 1;
        }
    };
    let run_id = cfg.run_id();
    init_logging(&run_id);
    if let Err(e) = commands::validate_inputs(cli.command, &cfg) {
        let _ = writeln!(err, "error: {e}");
        return 1;
    }
    if cli.dry_run {
        let _ = writeln!(out, "run {run_id}: {:?}", cli.command);
        for step in commands::plan(cli.command, &cfg) {
            let _ = writeln!(out, "  - {step}");
        }
        return 0;
    }
    log::info!("starting {:?}", cli.command);
    match commands::execute(cli.command, &cfg, out) {
        Ok(()) => {
            log::info!("finished {:?}", cli.command);
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
