//! The provider simulator behind HTTP, at OpenStack-like paths. Responses
//! are `Timed` envelopes; failures carry a `ProviderError` body.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use harmcloud_core::provider::{CloudApi, CreateServersRequest, Credentials, ProviderError, ProviderSim, ScannerApi};
use serde::{Deserialize, Serialize};

pub const TOKEN_HEADER: &str = "x-auth-token";
/// Header carrying the issued token on authentication responses.
pub const SUBJECT_TOKEN_HEADER: &str = "x-subject-token";

/// Body of `POST /compute/servers/{id}/action`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ServerAction {
    #[serde(rename = "rebuild")]
    Rebuild {
        #[serde(rename = "imageRef")]
        image_ref: String,
    },
    #[serde(rename = "os-migrateLive")]
    MigrateLive { host: String },
}

pub fn status_for(e: &ProviderError) -> StatusCode {
    match e {
        ProviderError::AuthFailed | ProviderError::TokenExpired | ProviderError::TokenInvalid => StatusCode::UNAUTHORIZED,
        ProviderError::UnknownVm(_) | ProviderError::UnknownImage(_) | ProviderError::UnknownHost(_) => StatusCode::NOT_FOUND,
        ProviderError::UnknownRefs(_) | ProviderError::ParseError(_) => StatusCode::BAD_REQUEST,
        ProviderError::CapacityExceeded(_) | ProviderError::SameHost(_) | ProviderError::VmBusy(_) => StatusCode::CONFLICT,
        ProviderError::EndpointUnreachable(_) => StatusCode::SERVICE_UNAVAILABLE,
    }
}

fn respond<T: Serialize>(result: Result<T, ProviderError>) -> Response {
    match result {
        Ok(body) => Json(body).into_response(),
        Err(e) => (status_for(&e), Json(e)).into_response(),
    }
}

fn token(headers: &HeaderMap) -> String {
    headers
        .get(TOKEN_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string()
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ProviderError> {
    serde_json::from_slice(body).map_err(|e| ProviderError::ParseError(e.to_string()))
}

type Sim = Arc<ProviderSim>;

async fn run<T, F>(sim: &Sim, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&ProviderSim) -> Result<T, ProviderError> + Send + 'static,
{
    let sim = Arc::clone(sim);
    match tokio::task::spawn_blocking(move || f(&sim)).await {
        Ok(r) => respond(r),
        Err(e) => respond::<()>(Err(ProviderError::EndpointUnreachable(e.to_string()))),
    }
}

pub fn router(sim: Sim) -> Router {
    Router::new()
        .route("/identity/auth", post(auth))
        .route("/compute/servers", get(servers).post(create))
        .route("/compute/servers/{id}/action", post(action))
        .route("/network/ports", get(ports))
        .route("/image/images", get(images))
        .route("/scanner/session", post(scanner_session))
        .route("/scanner/vulns", get(scanner_vulns))
        .with_state(sim)
}

async fn auth(State(sim): State<Sim>, body: Bytes) -> Response {
    let sim = Arc::clone(&sim);
    let result = tokio::task::spawn_blocking(move || sim.authenticate(&parse::<Credentials>(&body)?))
        .await
        .unwrap_or_else(|e| Err(ProviderError::EndpointUnreachable(e.to_string())));
    let header = result.as_ref().ok().and_then(|t| t.body.value.parse().ok());
    let mut resp = respond(result);
    if let Some(value) = header {
        resp.headers_mut().insert(SUBJECT_TOKEN_HEADER, value);
    }
    resp
}

async fn servers(State(sim): State<Sim>, headers: HeaderMap) -> Response {
    let t = token(&headers);
    run(&sim, move |s| s.list_servers(&t)).await
}

async fn create(State(sim): State<Sim>, headers: HeaderMap, body: Bytes) -> Response {
    let t = token(&headers);
    run(&sim, move |s| s.create_servers(&t, &parse::<CreateServersRequest>(&body)?)).await
}

async fn action(State(sim): State<Sim>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let t = token(&headers);
    run(&sim, move |s| match parse::<ServerAction>(&body)? {
        ServerAction::Rebuild { image_ref } => s.rebuild_server(&t, &id, &image_ref),
        ServerAction::MigrateLive { host } => s.live_migrate(&t, &id, &host),
    })
    .await
}

async fn ports(State(sim): State<Sim>, headers: HeaderMap) -> Response {
    let t = token(&headers);
    run(&sim, move |s| s.list_networks(&t)).await
}

async fn images(State(sim): State<Sim>, headers: HeaderMap) -> Response {
    let t = token(&headers);
    run(&sim, move |s| s.list_images(&t)).await
}

async fn scanner_session(State(sim): State<Sim>, body: Bytes) -> Response {
    run(&sim, move |s| s.scanner_authenticate(&parse::<Credentials>(&body)?)).await
}

async fn scanner_vulns(State(sim): State<Sim>, headers: HeaderMap) -> Response {
    let t = token(&headers);
    run(&sim, move |s| s.scanner_vulnerabilities(&t)).await
}

pub async fn serve(sim: Sim, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("provider listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(sim)).await
}
