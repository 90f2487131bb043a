//! Blocking client for the broker API, also implementing the transport
//! traits the edge validator and device use.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use aegon_core::attestation::{AttestationChain, DeviceRecord, ReceiptItemResult};
use aegon_core::device::ReceiptSubmitter;
use aegon_core::edge::{ContentHashReport, ContentHashSink, FetchError, HashAck, JwksFetcher, TransportError};
use aegon_core::keys::{Jwk, Jwks};
use aegon_core::merkle::{ConsistencyProof, InclusionProof};
use aegon_core::provenance::{ChainStatus, RecordAck, SignedEvent};
use aegon_core::spotcheck::{PublisherHealth, SpotCheckResult};
use aegon_core::token::LicenseRequest;
use aegon_core::SignedTreeHead;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::service::{ChallengeResponse, EntryBytes, IssueResponse, RegisterDevice, RegisterPlatform};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("{status} {error_code}: {message}")]
    Api { status: u16, error_code: String, message: String },
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            Self::Api { error_code, .. } => Some(error_code),
            Self::Transport(_) => None,
        }
    }
}

#[derive(Debug)]
pub struct BrokerClient {
    base: String,
    agent: ureq::Agent,
    admin_token: Option<String>,
    requests: AtomicU64,
}

impl BrokerClient {
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).max_idle_connections_per_host(64).build();
        Self { base: base.trim_end_matches('/').to_string(), agent, admin_token: None, requests: AtomicU64::new(0) }
    }

    pub fn with_admin_token(mut self, token: &str) -> Self {
        self.admin_token = Some(token.to_string());
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// Requests sent through this client so far.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut r = self.agent.request(method, &format!("{}{}", self.base, path));
        if let Some(t) = &self.admin_token {
            r = r.set("Authorization", &format!("Bearer {t}"));
        }
        r
    }

    fn finish<T: DeserializeOwned>(result: Result<ureq::Response, ureq::Error>) -> Result<T, ClientError> {
        match result {
            Ok(resp) => resp.into_json().map_err(|e| ClientError::Transport(e.to_string())),
            Err(ureq::Error::Status(status, resp)) => {
                let body: serde_json::Value = resp.into_json().unwrap_or_default();
                Err(ClientError::Api {
                    status,
                    error_code: body["error_code"].as_str().unwrap_or("unknown").to_string(),
                    message: body["message"].as_str().unwrap_or_default().to_string(),
                })
            }
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::finish(self.request("GET", path).call())
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::finish(self.request("POST", path).send_json(body))
    }

    pub fn issue_license(&self, req: &LicenseRequest) -> Result<IssueResponse, ClientError> {
        self.post("/v1/licenses", req)
    }

    pub fn content_hash(&self, report: &ContentHashReport) -> Result<HashAck, ClientError> {
        match self.post("/v1/content-hash", report) {
            Err(ClientError::Api { status: 404, .. }) => Ok(HashAck::NotFound),
            other => other,
        }
    }

    pub fn provenance(&self, event: &SignedEvent) -> Result<RecordAck, ClientError> {
        self.post("/v1/provenance", event)
    }

    pub fn chain_status(&self, txn_id: &str) -> Result<ChainStatus, ClientError> {
        self.get(&format!("/v1/provenance/{txn_id}"))
    }

    pub fn receipts(&self, batch: &[String]) -> Result<Vec<ReceiptItemResult>, ClientError> {
        self.post("/v1/receipts", &batch)
    }

    pub fn challenge(&self) -> Result<ChallengeResponse, ClientError> {
        self.get("/v1/devices/challenge")
    }

    pub fn register_device(&self, chain: &AttestationChain, challenge: &str) -> Result<DeviceRecord, ClientError> {
        self.post("/v1/devices", &RegisterDevice { chain: chain.clone(), challenge: challenge.to_string() })
    }

    pub fn revoke_device(&self, device_id: &str) -> Result<DeviceRecord, ClientError> {
        self.post(&format!("/v1/devices/{device_id}/revoke"), &json!({}))
    }

    pub fn register_platform(&self, platform_id: &str, key: &Jwk) -> Result<serde_json::Value, ClientError> {
        self.post("/v1/platforms", &RegisterPlatform { platform_id: platform_id.to_string(), public_key: key.clone() })
    }

    pub fn jwks(&self) -> Result<Jwks, ClientError> {
        self.get("/.well-known/jwks.json")
    }

    pub fn sth(&self) -> Result<SignedTreeHead, ClientError> {
        self.get("/v1/sth")
    }

    pub fn publish_sth(&self) -> Result<SignedTreeHead, ClientError> {
        self.post("/v1/admin/sth", &json!({}))
    }

    pub fn proof_for_txn(&self, txn_id: &str, tree_size: u64) -> Result<InclusionProof, ClientError> {
        self.get(&format!("/v1/proof?txn_id={txn_id}&tree_size={tree_size}"))
    }

    pub fn consistency(&self, old: u64, new: u64) -> Result<ConsistencyProof, ClientError> {
        self.get(&format!("/v1/consistency?old={old}&new={new}"))
    }

    pub fn entries(&self, txn_id: &str) -> Result<Vec<EntryBytes>, ClientError> {
        self.get(&format!("/v1/entries/{txn_id}"))
    }

    pub fn spot_checks(&self) -> Result<Vec<SpotCheckResult>, ClientError> {
        self.get("/v1/admin/spot-checks")
    }

    pub fn run_spot_checks(&self) -> Result<Vec<SpotCheckResult>, ClientError> {
        self.post("/v1/admin/spot-checks/run", &json!({}))
    }

    pub fn publisher_health(&self) -> Result<Vec<PublisherHealth>, ClientError> {
        self.get("/v1/admin/publisher-health")
    }
}

impl JwksFetcher for BrokerClient {
    fn fetch(&self) -> Result<Jwks, FetchError> {
        self.jwks().map_err(|e| FetchError(e.to_string()))
    }
}

impl ContentHashSink for BrokerClient {
    fn post_content_hash(&self, report: &ContentHashReport) -> Result<HashAck, TransportError> {
        self.content_hash(report).map_err(|e| TransportError(e.to_string()))
    }
}

impl ReceiptSubmitter for BrokerClient {
    fn submit(&self, batch: &[String]) -> Result<Vec<ReceiptItemResult>, TransportError> {
        self.receipts(batch).map_err(|e| TransportError(e.to_string()))
    }
}
