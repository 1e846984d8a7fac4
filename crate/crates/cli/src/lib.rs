//! Command-line driver: synthetic data, training, inference, evaluation and
//! region grading.

pub mod args;
pub mod commands;
pub mod report;

use std::ffi::OsString;

use anyhow::{Context, Result};
use clap::Parser;

pub use args::{Cli, Command, Profile};
pub use commands::{cmd_eval, cmd_grade, cmd_infer, cmd_synth, cmd_train};
pub use report::{parse_report, read_report, Record};

/// Caps the global rayon pool at `KIST_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("KIST_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("KIST_THREADS={value:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

/// Runs one parsed command and returns the records it emitted.
pub fn run(cli: Cli) -> Result<Vec<Record>> {
    let (p, s) = (cli.profile, cli.seed);
    match &cli.command {
        Command::Synth(a) => cmd_synth(p, s, a),
        Command::Train(a) => cmd_train(p, s, a),
        Command::Infer(a) => cmd_infer(p, s, a),
        Command::Eval(a) => cmd_eval(p, s, a),
        Command::Grade(a) => cmd_grade(p, s, a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<Vec<Record>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}
