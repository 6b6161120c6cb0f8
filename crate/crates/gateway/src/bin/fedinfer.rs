use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fedinfer_gateway::app::Gateway;
use fedinfer_gateway::auth::{MintRequest, MockIdp};
use fedinfer_gateway::clock::{Clock, ClockMode};
use fedinfer_gateway::config::GatewayConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "fedinfer", about = "Inference gateway over federated (simulated) HPC clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Run a standalone mock identity provider.
    Idp {
        #[arg(long, default_value = "127.0.0.1:8090")]
        listen: SocketAddr,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seconds each introspection takes.
        #[arg(long, default_value_t = 0.0)]
        delay: f64,
    },
    /// Ask a mock identity provider for a token.
    MintToken {
        /// Base URL of the provider, e.g. http://127.0.0.1:8090 or http://127.0.0.1:8080/idp.
        #[arg(long)]
        idp: String,
        #[arg(long)]
        subject: String,
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        #[arg(long)]
        ttl_secs: Option<f64>,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    match cli.command {
        Command::Serve { config, listen } => {
            let mut config = GatewayConfig::load(&config)?;
            if let Some(addr) = listen {
                config.listen = addr;
            }
            if config.scenario.clock == ClockMode::Virtual {
                bail!("serve needs `clock = \"wall\"`; virtual time is for in-process runs (bench --config)");
            }
            runtime.block_on(serve(config))
        }
        Command::Idp { listen, seed, delay } => runtime.block_on(async move {
            let idp = Arc::new(
                MockIdp::new(Clock::start(ClockMode::Wall, 0.0), seed)
                    .with_delay(std::time::Duration::from_secs_f64(delay)),
            );
            let listener = tokio::net::TcpListener::bind(listen).await?;
            tracing::info!(%listen, "mock identity provider listening");
            axum::serve(listener, idp.router()).with_graceful_shutdown(shutdown_signal()).await?;
            Ok(())
        }),
        Command::MintToken { idp, subject, groups, ttl_secs } => runtime.block_on(async move {
            let url = format!("{}/mint", idp.trim_end_matches('/'));
            let resp =
                reqwest::Client::new().post(&url).json(&MintRequest { subject, groups, ttl_secs }).send().await?;
            if !resp.status().is_success() {
                bail!("{url}: {} {}", resp.status(), resp.text().await.unwrap_or_default());
            }
            let token: serde_json::Value = resp.json().await?;
            println!("{}", token["access_token"].as_str().context("no access_token in response")?);
            Ok(())
        }),
    }
}

async fn serve(config: GatewayConfig) -> anyhow::Result<()> {
    let listen = config.listen;
    let gw = Gateway::build(config)?;
    for t in &gw.bootstrap {
        println!(
            "token for {} ({}): {}",
            t.subject,
            t.groups.iter().cloned().collect::<Vec<_>>().join(","),
            t.access_token
        );
    }
    let listener = tokio::net::TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
    tracing::info!(%listen, "gateway listening");
    axum::serve(listener, gw.router()).with_graceful_shutdown(shutdown_signal()).await?;
    gw.shutdown().await;
    Ok(())
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}
