//! Publisher-side request gate.
//!
//! `gate_request` validates the bearer token against a cached JWKS, binds it
//! to the requested URL and, for single-use licenses, consumes the `jti`.
//! With a warm cache no broker call happens on this path.

mod bloom;
mod jti;
mod jwks_cache;
mod url_norm;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bloom::BloomFilter;
pub use jti::{JtiConfig, JtiRegistry, JtiStats};
pub use jwks_cache::{CachedJwks, FetchError, JwksCache, JwksCachePolicy, JwksFetcher, JwksUnavailable};
pub use url_norm::normalize_url;

use crate::backoff::Backoff;
use crate::clock::Clock;
use crate::provenance::fingerprint;
use crate::token::{validate_token, LicenseClaims, LicenseType, RejectReason};

pub const TXN_HEADER: &str = "Aegon-Txn-Id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    MissingToken,
    JwksUnavailable,
    Token(RejectReason),
    ResourceMismatch,
    Replayed,
}

impl DenyReason {
    pub fn code(self) -> &'static str {
        match self {
            Self::MissingToken => "missing_token",
            Self::JwksUnavailable => "jwks_unavailable",
            Self::Token(r) => r.code(),
            Self::ResourceMismatch => "resource_mismatch",
            Self::Replayed => "replayed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateDecision {
    Allow { claims: LicenseClaims, txn_id: String },
    Deny { reason: DenyReason },
}

impl GateDecision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Self::Allow { .. })
    }

    pub fn deny_reason(&self) -> Option<DenyReason> {
        match self {
            Self::Deny { reason } => Some(*reason),
            Self::Allow { .. } => None,
        }
    }

    /// Headers to attach to the response. The transaction header is only
    /// sent on allow.
    pub fn response_headers(&self) -> Vec<(&'static str, String)> {
        match self {
            Self::Allow { txn_id, .. } => vec![(TXN_HEADER, txn_id.clone())],
            Self::Deny { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EdgeConfig {
    pub jwks: JwksCachePolicy,
    pub jti: JtiConfig,
}

pub struct EdgeValidator {
    jwks: JwksCache,
    jti: JtiRegistry,
}

impl EdgeValidator {
    pub fn new(fetcher: Arc<dyn JwksFetcher>, config: EdgeConfig, now: i64) -> Self {
        Self { jwks: JwksCache::new(fetcher, config.jwks), jti: JtiRegistry::new(config.jti, now) }
    }

    pub fn jwks_cache(&self) -> &JwksCache {
        &self.jwks
    }

    pub fn jti_registry(&self) -> &JtiRegistry {
        &self.jti
    }

    /// Ensures a usable JWKS copy, fetching if the cache is stale.
    pub fn refresh_jwks(&self, now: i64) -> Result<CachedJwks, JwksUnavailable> {
        self.jwks.get(now)?;
        self.jwks.snapshot().ok_or(JwksUnavailable)
    }

    pub fn gate_request(&self, authorization: Option<&str>, requested_url: &str, publisher_domain: &str, now: i64) -> GateDecision {
        let deny = |reason| GateDecision::Deny { reason };
        let Some(token) = authorization.and_then(bearer_token) else {
            return deny(DenyReason::MissingToken);
        };
        let jwks = match self.jwks.get(now) {
            Ok(j) => j,
            Err(_) => return deny(DenyReason::JwksUnavailable),
        };
        let claims = match validate_token(token, &jwks, publisher_domain, now) {
            Ok(c) => c,
            Err(RejectReason::UnknownKid) => match self.jwks.refresh_for_unknown_kid(now) {
                Some(newer) => match validate_token(token, &newer, publisher_domain, now) {
                    Ok(c) => c,
                    Err(r) => return deny(DenyReason::Token(r)),
                },
                None => return deny(DenyReason::Token(RejectReason::UnknownKid)),
            },
            Err(r) => return deny(DenyReason::Token(r)),
        };
        match (normalize_url(&claims.aegon_resource_url), normalize_url(requested_url)) {
            (Some(a), Some(b)) if a == b => {}
            _ => return deny(DenyReason::ResourceMismatch),
        }
        if claims.aegon_license_type == LicenseType::SingleUse && !self.jti.check_and_insert(&claims.jti, claims.exp, now) {
            return deny(DenyReason::Replayed);
        }
        let txn_id = claims.jti.clone();
        GateDecision::Allow { claims, txn_id }
    }
}

fn bearer_token(header: &str) -> Option<&str> {
    let (scheme, token) = header.trim().split_once(' ')?;
    let token = token.trim();
    (scheme.eq_ignore_ascii_case("bearer") && !token.is_empty()).then_some(token)
}

/// Body of `POST /v1/content-hash`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentHashReport {
    pub txn_id: String,
    pub content_sha256: String,
    pub publisher_domain: String,
    pub observed_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HashAck {
    Recorded { leaf_index: u64 },
    Duplicate { leaf_index: u64 },
    NotFound,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

/// Broker endpoint receiving publisher hash reports.
pub trait ContentHashSink: Send + Sync {
    fn post_content_hash(&self, report: &ContentHashReport) -> Result<HashAck, TransportError>;
}

/// Hashes the delivered bytes and reports them, retrying transport failures
/// on the backoff schedule up to `max_attempts` tries in total.
#[allow(clippy::too_many_arguments)]
pub fn report_content_hash<R: Rng + ?Sized>(
    sink: &dyn ContentHashSink,
    txn_id: &str,
    content: &[u8],
    publisher_domain: &str,
    clock: &dyn Clock,
    backoff: &Backoff,
    max_attempts: u32,
    rng: &mut R,
) -> Result<HashAck, TransportError> {
    let report = ContentHashReport {
        txn_id: txn_id.to_string(),
        content_sha256: fingerprint(content),
        publisher_domain: publisher_domain.to_string(),
        observed_at: clock.now(),
    };
    let mut attempt = 0;
    loop {
        match sink.post_content_hash(&report) {
            Ok(ack) => return Ok(ack),
            Err(e) => {
                attempt += 1;
                if attempt >= max_attempts.max(1) {
                    return Err(e);
                }
                clock.sleep(backoff.delay(attempt, rng));
            }
        }
    }
}
