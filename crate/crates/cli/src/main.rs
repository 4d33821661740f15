use clap::Parser;

fn main() -> anyhow::Result<()> {
    vidal_cli::cli::run(vidal_cli::cli::Cli::parse())
}
