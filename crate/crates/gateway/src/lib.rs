//! The restrictive service surface: signed envelopes, a static role matrix
//! and an HTTP transport that exposes nothing else.

pub mod audit;
pub mod config;
pub mod gateway;
pub mod http;
pub mod principal;
pub mod routes;

use std::sync::{Arc, Mutex};

use thiserror::Error;

use ownlink_core::protocol::{derive_keypair, ProtocolError};

pub use config::{Overrides, ServiceConfig};
pub use gateway::{ErrorCode, Gateway, GatewayError, Response};
pub use principal::{Client, Principal, RequestEnvelope, Role};
pub use routes::{authorize, Route, ROUTES};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Builds the gateway for `config`. The admin key derives from the seed.
pub fn build_gateway(config: &ServiceConfig) -> Result<Gateway, ProtocolError> {
    let admin = derive_keypair(config.seed, "admin").public_key();
    Gateway::new(config.system_config(), admin)
}

/// Binds the listener; fails fast when the port is taken.
pub async fn bind(config: &ServiceConfig) -> Result<tokio::net::TcpListener, ServeError> {
    let addr = format!("{}:{}", config.bind, config.ports.http);
    tokio::net::TcpListener::bind(&addr).await.map_err(|source| ServeError::Bind { addr, source })
}

/// Runs the HTTP service until `shutdown` resolves.
pub async fn serve(
    config: &ServiceConfig,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let gateway = Arc::new(Mutex::new(build_gateway(config)?));
    tracing::info!(addr = ?listener.local_addr().ok(), "gateway listening");
    axum::serve(listener, http::router(gateway)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
