//! HTTP API and command line for hilo experiments.

pub mod api;
pub mod cli;
pub mod error;
pub mod experiment;

pub use api::{router, AppState};

/// Binds and serves until the process is stopped. Prints the bound address
/// first, so a port of 0 can be discovered.
pub async fn serve(host: &str, port: u16, default_seed: Option<u64>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    println!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(default_seed))).await?;
    Ok(())
}
