//! Model registry and the HTTP API used by the studio front end.
//!
//! Routes: `GET /models`, `POST /generate`, `POST /interpolate`, `POST /segment`.
//! Bodies are JSON (see [`wire`]). Errors come back as [`wire::ErrorBody`] with
//! status 404 for unknown models, 422 for invalid inputs (one reason per field),
//! 413 for oversize requests and 400 for malformed JSON.

pub mod api;
pub mod registry;
pub mod wire;

use std::sync::Arc;

pub use api::{router, ApiError, Limits};
pub use registry::Registry;

/// Environment variable read for the bind address.
pub const BIND_ENV: &str = "SPATIALGAN_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

/// The explicit address, else `SPATIALGAN_BIND`, else the default.
pub fn bind_address(explicit: Option<&str>) -> String {
    explicit
        .map(str::to_string)
        .or_else(|| std::env::var(BIND_ENV).ok().filter(|v| !v.is_empty()))
        .unwrap_or_else(|| DEFAULT_BIND.to_string())
}

/// Serves the registry until the process is stopped.
pub async fn serve(registry: Arc<Registry>, addr: &str, limits: Limits) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, models = registry.len(), "serving");
    axum::serve(listener, router(registry, limits)).await
}
