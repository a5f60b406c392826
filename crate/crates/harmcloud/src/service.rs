//! HTTP+JSON API over an [`Engine`]. Every response body carries the
//! snapshot `version` it was computed from.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use harmcloud_core::harm::canonicalize_floats;
use harmcloud_core::metrics::{parse_metric_list, Metric, MetricPool, PathCaps};
use harmcloud_core::mtd::MtdAction;
use harmcloud_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::engine::{ApplyFailure, Engine};

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "MALFORMED_ACTION" | "UNKNOWN_METRIC" | "EMPTY_POOL" | "UNKNOWN_KIND" => StatusCode::BAD_REQUEST,
        "UNKNOWN_VERSION" => StatusCode::NOT_FOUND,
        "VERSION_CONFLICT" => StatusCode::CONFLICT,
        "CONSTRAINT_VIOLATION" | "PATH_EXPLOSION" | "NO_TARGET" | "UNKNOWN_TARGET" => StatusCode::UNPROCESSABLE_ENTITY,
        "DEPLOY_REJECTED" | "STATE_MISMATCH" | "DEPLOY_TIMEOUT" | "AUTH_FAILED" | "TOKEN_EXPIRED"
        | "TOKEN_INVALID" | "ENDPOINT_UNREACHABLE" | "PARSE_ERROR" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct ApiError {
    version: u64,
    error: Error,
    extra: Option<Value>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.error.code();
        let mut body = json!({
            "version": self.version,
            "error": { "code": code, "message": self.error.to_string() },
        });
        if let Some(extra) = self.extra {
            body["record"] = extra;
        }
        (status_for(code), Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// Run blocking engine work off the async workers.
async fn blocking<F>(engine: &Arc<Engine>, f: F) -> ApiResult
where
    F: FnOnce(&Engine) -> Result<Value, ApiFailure> + Send + 'static,
{
    let eng = Arc::clone(engine);
    let version = engine.version();
    match tokio::task::spawn_blocking(move || f(&eng)).await {
        Ok(Ok(mut v)) => {
            canonicalize_floats(&mut v);
            Ok(Json(v))
        }
        Ok(Err(fail)) => Err(ApiError {
            version: engine.version(),
            error: fail.error,
            extra: fail.record,
        }),
        Err(join) => Err(ApiError {
            version,
            error: Error::Io(format!("worker failed: {join}")),
            extra: None,
        }),
    }
}

struct ApiFailure {
    error: Error,
    record: Option<Value>,
}

impl From<Error> for ApiFailure {
    fn from(error: Error) -> Self {
        Self { error, record: None }
    }
}

impl From<ApplyFailure> for ApiFailure {
    fn from(f: ApplyFailure) -> Self {
        Self {
            error: f.error,
            record: f.record.map(|r| serde_json::to_value(r).expect("record serializes")),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ReadQuery {
    pub version: Option<u64>,
    /// Comma-separated metric names; all four when absent.
    pub pool: Option<String>,
    pub objective: Option<String>,
    pub max_depth: Option<usize>,
    pub path_cap: Option<usize>,
    #[serde(default)]
    pub lossy: bool,
    #[serde(default)]
    pub paths: bool,
}

impl ReadQuery {
    fn pool(&self) -> Result<MetricPool, Error> {
        pool_from(self.pool.as_deref(), self.max_depth, self.path_cap, !self.lossy, self.paths)
    }
}

pub fn pool_from(
    names: Option<&str>,
    max_depth: Option<usize>,
    path_cap: Option<usize>,
    strict: bool,
    include_paths: bool,
) -> Result<MetricPool, Error> {
    let selected = match names {
        Some(s) => parse_metric_list(s)?,
        None => Metric::ALL.into_iter().collect(),
    };
    let defaults = PathCaps::default();
    let caps = PathCaps {
        depth_cap: max_depth.unwrap_or(defaults.depth_cap),
        path_cap: path_cap.unwrap_or(defaults.path_cap),
        strict,
    };
    Ok(MetricPool {
        selected,
        caps,
        include_paths,
    })
}

/// Body of POST /whatif and POST /actions/apply.
#[derive(Debug, Deserialize)]
pub struct ActionRequest {
    pub action: MtdAction,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
    /// Snapshot version the client based its decision on.
    #[serde(default)]
    pub version: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum PoolSpec {
    List(String),
    Names(Vec<String>),
}

impl PoolSpec {
    fn to_pool(&self) -> Result<MetricPool, Error> {
        let joined = match self {
            PoolSpec::List(s) => s.clone(),
            PoolSpec::Names(v) => v.join(","),
        };
        pool_from(Some(&joined), None, None, true, false)
    }
}

pub fn parse_action_request(body: &[u8]) -> Result<ActionRequest, Error> {
    serde_json::from_slice(body).map_err(|e| Error::MalformedAction(e.to_string()))
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/inventory", get(inventory))
        .route("/harm", get(harm))
        .route("/metrics", get(metrics))
        .route("/actions", get(actions))
        .route("/whatif", post(whatif))
        .route("/actions/apply", post(apply))
        .route("/history", get(history))
        .route("/rescan", post(rescan))
        .with_state(engine)
}

async fn inventory(State(eng): State<Arc<Engine>>, Query(q): Query<ReadQuery>) -> ApiResult {
    blocking(&eng, move |e| {
        let snap = e.snapshot(q.version)?;
        Ok(json!({ "version": snap.version, "inventory": snap.state.inventory, "vulns": snap.state.vulns }))
    })
    .await
}

async fn harm(State(eng): State<Arc<Engine>>, Query(q): Query<ReadQuery>) -> ApiResult {
    blocking(&eng, move |e| {
        let (version, h) = e.harm(q.version)?;
        Ok(json!({ "version": version, "harm": h.to_canonical_value() }))
    })
    .await
}

async fn metrics(State(eng): State<Arc<Engine>>, Query(q): Query<ReadQuery>) -> ApiResult {
    blocking(&eng, move |e| {
        let (version, report) = e.metrics(&q.pool()?, q.version)?;
        Ok(json!({ "version": version, "report": report }))
    })
    .await
}

async fn actions(State(eng): State<Arc<Engine>>, Query(q): Query<ReadQuery>) -> ApiResult {
    blocking(&eng, move |e| {
        let objective = match &q.objective {
            Some(o) => o.parse::<Metric>().map_err(Error::from)?,
            None => Metric::SystemRisk,
        };
        let (version, ranked) = e.actions(&q.pool()?, objective)?;
        Ok(json!({ "version": version, "objective": objective, "actions": ranked }))
    })
    .await
}

async fn whatif(State(eng): State<Arc<Engine>>, body: Bytes) -> ApiResult {
    blocking(&eng, move |e| {
        let req = parse_action_request(&body)?;
        let pool = match &req.pool {
            Some(p) => p.to_pool()?,
            None => MetricPool::all(),
        };
        let (version, delta) = e.whatif(&req.action, &pool)?;
        Ok(json!({ "version": version, "action": req.action, "delta": delta }))
    })
    .await
}

async fn apply(State(eng): State<Arc<Engine>>, body: Bytes) -> ApiResult {
    blocking(&eng, move |e| {
        let req = parse_action_request(&body)?;
        let record = e.apply(&req.action, req.version)?;
        Ok(json!({ "version": e.version(), "record": record }))
    })
    .await
}

async fn history(State(eng): State<Arc<Engine>>) -> ApiResult {
    blocking(&eng, move |e| {
        let snaps: Vec<Value> = e
            .history()
            .iter()
            .map(|s| {
                let mut p = serde_json::to_value(&s.provenance).expect("provenance serializes");
                if let Some(obj) = p.as_object_mut() {
                    obj.remove("record");
                }
                json!({ "version": s.version, "provenance": p })
            })
            .collect();
        Ok(json!({ "version": e.version(), "records": e.deployments(), "snapshots": snaps }))
    })
    .await
}

async fn rescan(State(eng): State<Arc<Engine>>) -> ApiResult {
    blocking(&eng, move |e| {
        let out = e.rescan()?;
        Ok(json!({ "version": out.version, "calls": out.calls }))
    })
    .await
}

/// Serve until the process exits.
pub async fn serve(engine: Arc<Engine>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(engine)).await
}
