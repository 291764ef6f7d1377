//! The `capgen` command line: one subcommand per pipeline stage.
//!
//! Configuration is layered: built-in defaults, then `--config FILE`
//! (`key = value` lines), then the `CAPGEN_DATASET`, `CAPGEN_MODEL_DIR` and
//! `CAPGEN_REPORT_DIR` path overrides, then one `--<field>` flag per field.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

pub use config::{ConfigArgs, ConfigError, PipelineConfig, SplitChoice};
pub use pipeline::{run, Command, PipelineError};

#[derive(Debug, Parser)]
#[command(name = "capgen", version, about = "Caption images from region features")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn resolve(&self, env: impl Fn(&str) -> Option<String>) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        cfg.apply_env(env)?;
        self.overrides.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, env: impl Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = cli.resolve(env).map_err(PipelineError::from).and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
