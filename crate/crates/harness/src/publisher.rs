//! Toy publisher: fixture articles behind the edge validator.
//!
//! Licensed requests are gated offline against a cached JWKS and, when
//! allowed, answered with the `Aegon-Txn-Id` header and reported to the
//! broker as a content hash. Requests carrying the spot-check header are the
//! broker's re-fetches; a misbehaving publisher can answer those with
//! different bytes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use aegon_broker::client::BrokerClient;
use aegon_broker::http::BackgroundServer;
use aegon_core::backoff::Backoff;
use aegon_core::clock::Clock;
use aegon_core::edge::{report_content_hash, EdgeConfig, EdgeValidator, GateDecision, HashAck};
use aegon_core::spotcheck::SPOT_CHECK_HEADER;
use axum::body::Body;
use axum::extract::State;
use axum::http::{HeaderMap, Response, StatusCode, Uri};
use axum::Router;
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

pub const PUBLISHER_DOMAIN: &str = "publisher.test";
pub const PUBLISHER_ORIGIN: &str = "https://publisher.test";

/// Article bodies served under `/articles/{n}`.
pub fn fixture_articles() -> BTreeMap<String, Vec<u8>> {
    (1..=8)
        .map(|n| {
            let body = format!(
                "<article id=\"{n}\"><h1>Field notes {n}</h1><p>Tidal flats at dawn, survey line {n}. Sediment cores were logged every {} metres.</p></article>",
                n * 25
            );
            (format!("/articles/{n}"), body.into_bytes())
        })
        .collect()
}

/// One request as the publisher saw it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Served {
    pub path: String,
    pub status: u16,
    pub spot_check: bool,
    pub txn_id: Option<String>,
    pub deny_reason: Option<String>,
    pub hash_ack: Option<HashAck>,
}

struct Inner {
    articles: BTreeMap<String, Vec<u8>>,
    validator: EdgeValidator,
    edge_client: Arc<BrokerClient>,
    report_client: BrokerClient,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha20Rng>,
    divergent_spot_checks: AtomicBool,
    misreport_hash: AtomicBool,
    served: Mutex<Vec<Served>>,
}

pub struct ToyPublisher {
    inner: Arc<Inner>,
    server: BackgroundServer,
}

impl std::fmt::Debug for ToyPublisher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyPublisher").field("addr", &self.server.addr).finish()
    }
}

/// Bytes the publisher serves to spot-check requests when misbehaving.
pub fn divergent_variant(body: &[u8]) -> Vec<u8> {
    let mut v = body.to_vec();
    v.extend_from_slice(b"<!-- revised -->");
    v
}

impl ToyPublisher {
    /// Starts on loopback with a warm JWKS cache fetched from `broker_url`.
    pub fn start(broker_url: &str, clock: Arc<dyn Clock>, seed: u64) -> std::io::Result<Self> {
        let edge_client = Arc::new(BrokerClient::new(broker_url));
        let validator = EdgeValidator::new(edge_client.clone(), EdgeConfig::default(), clock.now());
        validator.refresh_jwks(clock.now()).map_err(|_| std::io::Error::other("broker JWKS unavailable"))?;
        let inner = Arc::new(Inner {
            articles: fixture_articles(),
            validator,
            edge_client,
            report_client: BrokerClient::new(broker_url),
            clock,
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
            divergent_spot_checks: AtomicBool::new(false),
            misreport_hash: AtomicBool::new(false),
            served: Mutex::new(Vec::new()),
        });
        let router = Router::new().fallback(handle).with_state(inner.clone());
        let server = BackgroundServer::start(router, None)?;
        Ok(Self { inner, server })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn article(&self, path: &str) -> Option<&[u8]> {
        self.inner.articles.get(path).map(Vec::as_slice)
    }

    /// Broker requests made by the edge validator (JWKS fetches).
    pub fn edge_broker_calls(&self) -> u64 {
        self.inner.edge_client.request_count()
    }

    pub fn validator(&self) -> &EdgeValidator {
        &self.inner.validator
    }

    pub fn serve_divergent_spot_checks(&self, on: bool) {
        self.inner.divergent_spot_checks.store(on, Ordering::SeqCst);
    }

    pub fn misreport_hashes(&self, on: bool) {
        self.inner.misreport_hash.store(on, Ordering::SeqCst);
    }

    pub fn served(&self) -> Vec<Served> {
        self.inner.served.lock().clone()
    }
}

async fn handle(State(inner): State<Arc<Inner>>, uri: Uri, headers: HeaderMap) -> Response<Body> {
    tokio::task::spawn_blocking(move || inner.serve(&uri, &headers))
        .await
        .unwrap_or_else(|_| respond(StatusCode::INTERNAL_SERVER_ERROR, Vec::new(), json!({"error_code": "internal"}).to_string().into_bytes()))
}

fn respond(status: StatusCode, headers: Vec<(&'static str, String)>, body: Vec<u8>) -> Response<Body> {
    let mut r = Response::builder().status(status);
    for (k, v) in headers {
        r = r.header(k, v);
    }
    r.body(Body::from(body)).expect("static response parts")
}

fn deny_body(code: &str) -> Vec<u8> {
    json!({"error_code": code}).to_string().into_bytes()
}

impl Inner {
    fn serve(&self, uri: &Uri, headers: &HeaderMap) -> Response<Body> {
        let path = uri.path().to_string();
        let mut served = Served { path: path.clone(), status: 200, spot_check: false, txn_id: None, deny_reason: None, hash_ack: None };
        let response = self.serve_inner(uri, headers, &mut served);
        served.status = response.status().as_u16();
        self.served.lock().push(served);
        response
    }

    fn serve_inner(&self, uri: &Uri, headers: &HeaderMap, served: &mut Served) -> Response<Body> {
        let Some(article) = self.articles.get(uri.path()) else {
            return respond(StatusCode::NOT_FOUND, Vec::new(), deny_body("not_found"));
        };
        if headers.contains_key(SPOT_CHECK_HEADER) {
            served.spot_check = true;
            let body = if self.divergent_spot_checks.load(Ordering::SeqCst) { divergent_variant(article) } else { article.clone() };
            return respond(StatusCode::OK, Vec::new(), body);
        }

        let now = self.clock.now();
        let auth = headers.get("authorization").and_then(|v| v.to_str().ok());
        let url = format!("{PUBLISHER_ORIGIN}{}", uri.path_and_query().map(|p| p.as_str()).unwrap_or("/"));
        let decision = self.validator.gate_request(auth, &url, PUBLISHER_DOMAIN, now);
        let txn_id = match &decision {
            GateDecision::Allow { txn_id, .. } => txn_id.clone(),
            GateDecision::Deny { reason } => {
                served.deny_reason = Some(reason.code().to_string());
                let status = if reason.code() == "missing_token" { StatusCode::UNAUTHORIZED } else { StatusCode::FORBIDDEN };
                return respond(status, Vec::new(), deny_body(reason.code()));
            }
        };
        served.txn_id = Some(txn_id.clone());

        let reported = if self.misreport_hash.load(Ordering::SeqCst) { divergent_variant(article) } else { article.clone() };
        let backoff = Backoff { jitter: 0.0, ..Backoff::default() };
        let ack = report_content_hash(&self.report_client, &txn_id, &reported, PUBLISHER_DOMAIN, self.clock.as_ref(), &backoff, 3, &mut *self.rng.lock());
        served.hash_ack = ack.ok();
        respond(StatusCode::OK, decision.response_headers(), article.clone())
    }
}
