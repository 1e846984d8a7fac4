use clap::Parser;
use kist_cli::{configure_threads, run, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads()?;
    run(Cli::parse())?;
    Ok(())
}
