//! JSON-over-HTTP routes. Handlers move broker calls onto the blocking pool
//! since ledger appends fsync.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::service::{ApiError, Broker, ProofTarget};

type Shared = Arc<Broker>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({"error_code": self.error_code, "message": self.message}))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

async fn blocking<T, F>(broker: &Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Broker) -> Result<T, ApiError> + Send + 'static,
{
    let b = broker.clone();
    tokio::task::spawn_blocking(move || f(&b)).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(400, "malformed_request", e.to_string()))
}

fn ok<T: Serialize>(v: T) -> ApiResult {
    Ok(Json(v).into_response())
}

fn query_u64(q: &HashMap<String, String>, key: &str) -> Result<Option<u64>, ApiError> {
    q.get(key).map(|v| v.parse::<u64>().map_err(|_| ApiError::validation(format!("{key} must be a non-negative integer")))).transpose()
}

async fn issue_license(State(b): State<Shared>, body: Bytes) -> ApiResult {
    let req = parse(&body)?;
    let issued = blocking(&b, move |b| b.issue_license(&req)).await?;
    Ok((StatusCode::CREATED, Json(crate::service::IssueResponse::from(issued))).into_response())
}

async fn content_hash(State(b): State<Shared>, body: Bytes) -> ApiResult {
    let report = parse(&body)?;
    let ack = blocking(&b, move |b| b.report_content_hash(&report)).await?;
    if ack == aegon_core::edge::HashAck::NotFound {
        return Ok((StatusCode::NOT_FOUND, Json(ack)).into_response());
    }
    ok(ack)
}

async fn provenance(State(b): State<Shared>, body: Bytes) -> ApiResult {
    let event = parse(&body)?;
    ok(blocking(&b, move |b| b.record_provenance(&event)).await?)
}

async fn provenance_status(State(b): State<Shared>, Path(txn): Path<String>) -> ApiResult {
    ok(blocking(&b, move |b| b.chain_status(&txn)).await?)
}

async fn receipts(State(b): State<Shared>, body: Bytes) -> ApiResult {
    let batch: Vec<String> = parse(&body)?;
    ok(blocking(&b, move |b| b.submit_receipts(&batch)).await?)
}

async fn challenge(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| Ok(b.issue_challenge())).await?)
}

async fn register_device(State(b): State<Shared>, body: Bytes) -> ApiResult {
    let req = parse(&body)?;
    let rec = blocking(&b, move |b| b.register_device(&req)).await?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn get_device(State(b): State<Shared>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&b, move |b| b.device(&id)).await?)
}

async fn revoke_device(State(b): State<Shared>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&b, move |b| b.revoke_device(&id)).await?)
}

async fn register_platform(State(b): State<Shared>, body: Bytes) -> ApiResult {
    let req: crate::service::RegisterPlatform = parse(&body)?;
    let id = req.platform_id.clone();
    blocking(&b, move |b| b.register_platform(&req)).await?;
    Ok((StatusCode::CREATED, Json(json!({"platform_id": id}))).into_response())
}

async fn jwks(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| Ok(b.jwks())).await?)
}

async fn sth(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| b.latest_sth()).await?)
}

async fn sth_history(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| Ok(b.sth_history())).await?)
}

async fn proof(State(b): State<Shared>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let tree_size = query_u64(&q, "tree_size")?;
    let leaf = query_u64(&q, "leaf_index")?;
    let txn = q.get("txn_id").cloned();
    ok(blocking(&b, move |b| match (txn.as_deref(), leaf) {
        (Some(t), _) => b.inclusion_proof(ProofTarget::Txn(t), tree_size),
        (None, Some(i)) => b.inclusion_proof(ProofTarget::Leaf(i), tree_size),
        (None, None) => Err(ApiError::validation("txn_id or leaf_index is required")),
    })
    .await?)
}

async fn consistency(State(b): State<Shared>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let old = query_u64(&q, "old")?.ok_or_else(|| ApiError::validation("old is required"))?;
    let new = query_u64(&q, "new")?.ok_or_else(|| ApiError::validation("new is required"))?;
    ok(blocking(&b, move |b| b.consistency_proof(old, new)).await?)
}

async fn entries(State(b): State<Shared>, Path(txn): Path<String>) -> ApiResult {
    ok(blocking(&b, move |b| b.entries(&txn)).await?)
}

async fn leaf(State(b): State<Shared>, Path(i): Path<u64>) -> ApiResult {
    ok(blocking(&b, move |b| b.entry_at(i)).await?)
}

async fn spot_checks(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| Ok(b.spot_checks())).await?)
}

async fn run_spot_checks(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| b.run_spot_checks()).await?)
}

async fn publisher_health(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| Ok(b.publisher_health())).await?)
}

async fn publish_sth(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| b.publish_sth_now()).await?)
}

async fn rotate_key(State(b): State<Shared>) -> ApiResult {
    let kid = blocking(&b, |b| b.rotate_token_key()).await?;
    ok(json!({"kid": kid}))
}

async fn status(State(b): State<Shared>) -> ApiResult {
    ok(blocking(&b, |b| Ok(b.status())).await?)
}

async fn require_admin(State(b): State<Shared>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(expected) = &b.config().admin_token {
        let presented = headers.get("authorization").and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_str()) {
            return ApiError::new(401, "unauthorized", "admin token required").into_response();
        }
    }
    next.run(req).await
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(broker: Shared) -> Router {
    let admin = Router::new()
        .route("/v1/admin/spot-checks", get(spot_checks))
        .route("/v1/admin/spot-checks/run", post(run_spot_checks))
        .route("/v1/admin/publisher-health", get(publisher_health))
        .route("/v1/admin/sth", post(publish_sth))
        .route("/v1/admin/rotate-key", post(rotate_key))
        .route("/v1/admin/status", get(status))
        .route("/v1/devices/{id}/revoke", post(revoke_device))
        .route("/v1/platforms", post(register_platform))
        .route_layer(middleware::from_fn_with_state(broker.clone(), require_admin));
    Router::new()
        .route("/v1/licenses", post(issue_license))
        .route("/v1/content-hash", post(content_hash))
        .route("/v1/provenance", post(provenance))
        .route("/v1/provenance/{txn_id}", get(provenance_status))
        .route("/v1/receipts", post(receipts))
        .route("/v1/devices/challenge", get(challenge))
        .route("/v1/devices", post(register_device))
        .route("/v1/devices/{id}", get(get_device))
        .route("/.well-known/jwks.json", get(jwks))
        .route("/v1/sth", get(sth))
        .route("/v1/sth/history", get(sth_history))
        .route("/v1/proof", get(proof))
        .route("/v1/consistency", get(consistency))
        .route("/v1/entries/{txn_id}", get(entries))
        .route("/v1/leaves/{leaf_index}", get(leaf))
        .merge(admin)
        .fallback(fallback)
        .with_state(broker)
}

/// Serves until `shutdown` resolves, running `Broker::tick` every
/// `tick_every` when set.
pub async fn serve(
    broker: Shared,
    listener: TcpListener,
    tick_every: Option<Duration>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = tick_every.map(|every| {
        let b = broker.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(every);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                let b = b.clone();
                if let Ok(Err(e)) = tokio::task::spawn_blocking(move || b.tick()).await {
                    tracing::warn!(error = %e, "periodic tick failed");
                }
            }
        })
    });
    let result = axum::serve(listener, router(broker)).with_graceful_shutdown(shutdown).await;
    if let Some(t) = ticker {
        t.abort();
    }
    result
}

/// A broker served on its own runtime thread; stops when dropped.
#[derive(Debug)]
pub struct BackgroundServer {
    pub addr: std::net::SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Binds `127.0.0.1:0` (or `addr`) and serves `router` there.
    pub fn start(router: Router, addr: Option<std::net::SocketAddr>) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
        let listener = rt.block_on(TcpListener::bind(addr.unwrap_or_else(|| ([127, 0, 0, 1], 0).into())))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, router)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
            rt.shutdown_timeout(Duration::from_secs(1));
        });
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        self.stop();
    }
}
