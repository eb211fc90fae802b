use clap::Parser;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "cipherray-server", version, about = "Render server for encrypted volumes")]
struct Cli {
    #[command(flatten)]
    config: cipherray_server::Config,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    cipherray_server::serve(Cli::parse().config).await
}
