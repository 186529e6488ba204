use clap::Parser;
use fdgnn_cli::{init_workers, run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    init_workers()?;
    run(cli)
}
