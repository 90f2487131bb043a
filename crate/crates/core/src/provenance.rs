//! Platform-signed provenance events for the five AI pipeline stages, and
//! the per-transaction chain check.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use p256::ecdsa::{SigningKey, VerifyingKey};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::canonical_encode_serialize;
use crate::jws::{self, CompactJws, JoseHeader};
use crate::keys::Jwk;
use crate::ledger::{EntryType, Ledger, LedgerError, NewEntry, StoredEntry};
use crate::token::wire_enum;

/// Lowercase hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

wire_enum!(ProvenanceEventType {
    ContentFetched => "content_fetched",
    ContentChunked => "content_chunked",
    ChunkEmbedded => "chunk_embedded",
    ChunkRetrieved => "chunk_retrieved",
    ContentCited => "content_cited",
});

impl ProvenanceEventType {
    /// Position in the fetch -> cite pipeline.
    pub fn stage(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).unwrap()
    }
}

/// The platform-asserted part of an event; this is exactly what the
/// platform signs (canonically encoded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventBody {
    pub txn_id: String,
    pub event_type: String,
    pub content_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_detail: Option<Map<String, Value>>,
    pub client_timestamp: i64,
}

/// Wire form of `POST /v1/provenance`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedEvent {
    #[serde(flatten)]
    pub body: EventBody,
    /// Compact JWS over the canonical encoding of `body`.
    pub platform_signature: String,
}

impl SignedEvent {
    pub fn sign(body: EventBody, key: &SigningKey, kid: &str) -> Self {
        let payload = canonical_encode_serialize(&body).expect("event body encodes");
        let platform_signature = jws::sign(&JoseHeader::es256("aegon-provenance+jws", kid), &payload, key);
        Self { body, platform_signature }
    }

    /// Signature valid under `key` and covering exactly `body`.
    pub fn verify(&self, key: &VerifyingKey) -> bool {
        let Ok(parsed) = CompactJws::parse(&self.platform_signature) else {
            return false;
        };
        let Ok(expected) = canonical_encode_serialize(&self.body) else {
            return false;
        };
        parsed.payload == expected && parsed.verify(key)
    }
}

#[derive(Debug, Error)]
pub enum ProvenanceError {
    #[error("txn {0} not found")]
    NotFound(String),
    #[error("platform signature rejected")]
    BadSignature,
    #[error("invalid event: {0}")]
    Validation(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordAck {
    pub leaf_index: u64,
    pub server_receipt_timestamp: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skew_seconds: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashMatch {
    Match,
    Mismatch,
    Unreported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkewFlag {
    pub leaf_index: u64,
    pub event_type: String,
    pub skew_seconds: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStatus {
    pub txn_id: String,
    pub events_present: BTreeMap<String, u32>,
    pub order_valid: bool,
    pub first_event_is_fetch: bool,
    pub timestamp_flags: Vec<SkewFlag>,
    pub fetch_hash_matches_publisher: HashMatch,
}

/// Registered platform keys plus the event-recording and chain-checking
/// logic.
pub struct ProvenanceLog {
    platforms: RwLock<HashMap<String, VerifyingKey>>,
    skew_threshold: i64,
    rejected: AtomicU64,
}

impl ProvenanceLog {
    pub fn new(skew_threshold: i64) -> Self {
        Self { platforms: RwLock::new(HashMap::new()), skew_threshold, rejected: AtomicU64::new(0) }
    }

    pub fn register_platform(&self, platform_id: &str, key: VerifyingKey) {
        self.platforms.write().insert(platform_id.to_string(), key);
    }

    pub fn register_platform_jwk(&self, platform_id: &str, jwk: &Jwk) -> Result<(), crate::keys::KeyError> {
        self.register_platform(platform_id, jwk.to_key()?);
        Ok(())
    }

    pub fn platform_key(&self, platform_id: &str) -> Option<VerifyingKey> {
        self.platforms.read().get(platform_id).copied()
    }

    /// Signature rejections seen so far. These are telemetry only and never
    /// reach the ledger.
    pub fn rejected_signatures(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn skew_threshold(&self) -> i64 {
        self.skew_threshold
    }

    /// Verifies and records one event. The server receipt timestamp is
    /// `now`; a gap beyond the skew threshold is stored with the event.
    pub fn record_event(&self, ledger: &Ledger, event: &SignedEvent, now: i64) -> Result<RecordAck, ProvenanceError> {
        let body = &event.body;
        body.event_type.parse::<ProvenanceEventType>().map_err(ProvenanceError::Validation)?;
        if body.content_fingerprint.len() != 64 || !body.content_fingerprint.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(ProvenanceError::Validation("content_fingerprint must be 64 lowercase hex chars".into()));
        }
        let license = ledger.license_entry(&body.txn_id).ok_or_else(|| ProvenanceError::NotFound(body.txn_id.clone()))?;
        let platform = license.entry.payload["claims"]["sub"].as_str().unwrap_or_default().to_string();
        let verified = self.platform_key(&platform).is_some_and(|k| event.verify(&k));
        if !verified {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(ProvenanceError::BadSignature);
        }
        let skew = (now - body.client_timestamp).abs();
        let skew_seconds = (skew > self.skew_threshold).then_some(now - body.client_timestamp);
        let mut payload = json!({
            "event": body,
            "platform_signature": event.platform_signature,
            "server_receipt_timestamp": now,
        });
        if let Some(s) = skew_seconds {
            payload["skew_seconds"] = json!(s);
        }
        let leaf_index = ledger.append(NewEntry { txn_id: body.txn_id.clone(), entry_type: EntryType::ProvenanceEvent, payload, server_timestamp: now })?;
        Ok(RecordAck { leaf_index, server_receipt_timestamp: now, skew_seconds })
    }

    /// Chain status over every recorded event for `txn_id`, in ledger order.
    pub fn validate_chain(&self, ledger: &Ledger, txn_id: &str) -> ChainStatus {
        chain_status(&ledger.entries_for(txn_id), txn_id, self.skew_threshold)
    }
}

/// Reads a stored provenance entry back into its signed wire form.
pub fn stored_event(entry: &StoredEntry) -> Option<SignedEvent> {
    if entry.entry.entry_type != EntryType::ProvenanceEvent {
        return None;
    }
    let body: EventBody = serde_json::from_value(entry.entry.payload.get("event")?.clone()).ok()?;
    let platform_signature = entry.entry.payload.get("platform_signature")?.as_str()?.to_string();
    Some(SignedEvent { body, platform_signature })
}

fn chain_status(entries: &[std::sync::Arc<StoredEntry>], txn_id: &str, skew_threshold: i64) -> ChainStatus {
    let mut counts: BTreeMap<String, u32> = ProvenanceEventType::ALL.iter().map(|t| (t.as_str().to_string(), 0)).collect();
    let mut first_seen: [Option<usize>; 5] = [None; 5];
    let mut first_kind = None;
    let mut flags = Vec::new();
    let mut fetch_hash = None;
    let mut publisher_hash = None;

    for (pos, e) in entries.iter().enumerate() {
        match e.entry.entry_type {
            EntryType::ProvenanceEvent => {
                let Some(ev) = stored_event(e) else { continue };
                let Ok(kind) = ev.body.event_type.parse::<ProvenanceEventType>() else { continue };
                *counts.get_mut(kind.as_str()).unwrap() += 1;
                first_kind.get_or_insert(kind);
                first_seen[kind.stage()].get_or_insert(pos);
                if kind == ProvenanceEventType::ContentFetched && fetch_hash.is_none() {
                    fetch_hash = Some(ev.body.content_fingerprint.clone());
                }
                let server = e.entry.payload["server_receipt_timestamp"].as_i64().unwrap_or(e.entry.server_timestamp);
                let skew = server - ev.body.client_timestamp;
                if skew.abs() > skew_threshold {
                    flags.push(SkewFlag { leaf_index: e.entry.leaf_index, event_type: kind.as_str().into(), skew_seconds: skew });
                }
            }
            EntryType::ContentHashReported if publisher_hash.is_none() => {
                publisher_hash = e.entry.payload["content_sha256"].as_str().map(str::to_string);
            }
            _ => {}
        }
    }

    // Among the stages present, first occurrences must follow pipeline order.
    let present: Vec<usize> = first_seen.iter().flatten().copied().collect();
    let order_valid = present.windows(2).all(|w| w[0] < w[1]);

    let fetch_hash_matches_publisher = match (fetch_hash, publisher_hash) {
        (Some(a), Some(b)) if a == b => HashMatch::Match,
        (Some(_), Some(_)) => HashMatch::Mismatch,
        _ => HashMatch::Unreported,
    };

    ChainStatus {
        txn_id: txn_id.to_string(),
        events_present: counts,
        order_valid,
        first_event_is_fetch: first_kind == Some(ProvenanceEventType::ContentFetched),
        timestamp_flags: flags,
        fetch_hash_matches_publisher,
    }
}
