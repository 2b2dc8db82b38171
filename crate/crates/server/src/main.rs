use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use chorus_core::time::SystemClock;
use chorus_core::ChorusConfig;
use chorus_server::{router, spawn_ticker, AppState};
use clap::Parser;

/// Serves the chorus gateway API.
#[derive(Parser)]
#[command(name = "chorus-server", version)]
struct Cli {
    /// TOML config. `CHORUS_*` variables apply on top.
    #[arg(long, env = "CHORUSD_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "CHORUSD_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// JSONL event log. Replayed on start, appended to while running.
    #[arg(long, env = "CHORUSD_LOG", default_value = "chorus-events.jsonl")]
    log: PathBuf,
    /// How often to check session timeouts, in milliseconds.
    #[arg(long, env = "CHORUSD_TICK_MS", default_value_t = 1000)]
    tick_ms: u64,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    let config = ChorusConfig::load(cli.config.as_deref())?;
    if config.gateway.admin_token == ChorusConfig::default().gateway.admin_token {
        tracing::warn!("admin token is the default; set CHORUS_GATEWAY__ADMIN_TOKEN");
    }
    let state = AppState::open(config, &cli.log, Arc::new(SystemClock))?;
    spawn_ticker(state.clone(), Duration::from_millis(cli.tick_ms.max(1)));
    let listener = tokio::net::TcpListener::bind(cli.bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
