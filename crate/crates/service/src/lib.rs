//! Dosing-session service: event-sourced patient sessions over HTTP + JSON.

pub mod api;
pub mod error;
pub mod session;
pub mod store;

pub use api::{router, AppState, ServiceConfig};
pub use error::{ServiceError, ServiceResult};

/// Binds and serves until the process is stopped.
pub async fn serve(app: std::sync::Arc<AppState>, bind: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((bind, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
