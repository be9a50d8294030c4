use clap::Parser;
use mos_cli::{run, RunConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(RunConfig::parse())
}
