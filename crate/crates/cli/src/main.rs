use clap::Parser;

fn main() -> anyhow::Result<()> {
    cipherray_cli::run(cipherray_cli::Cli::parse())
}
