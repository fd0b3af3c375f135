use anyhow::Result;
use clap::Parser;

use melgraph::cli;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let parsed = cli::Cli::parse();
    cli::run(parsed)?;
    Ok(())
}
