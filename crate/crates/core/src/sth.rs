//! Signed tree heads, their history, and the signature-checking wrappers
//! around the Merkle proof verifiers.

use std::path::Path;

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::Signature;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::canonical::canonical_encode;
use crate::jws::{b64, unb64};
use crate::keys::{BrokerKey, Jwks, KeyPurpose};
use crate::ledger::Ledger;
use crate::logfile::{LogError, RecordLog};
use crate::merkle::{self, hex_digest, ConsistencyProof, Digest, InclusionProof};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedTreeHead {
    pub tree_size: u64,
    #[serde(with = "hex_digest")]
    pub root_hash: Digest,
    /// UTC milliseconds.
    pub timestamp: i64,
    /// base64url raw `r || s`.
    pub signature: String,
    pub key_id: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SthError {
    #[error("STH key {0} not in JWKS")]
    UnknownKey(String),
    #[error("bad STH signature")]
    BadSignature,
}

/// Bytes covered by the tree-head signature:
/// `{"root_hash":"<hex>","timestamp":<ms>,"tree_size":<n>}`.
pub fn sth_signing_bytes(tree_size: u64, root_hash: &Digest, timestamp: i64) -> Vec<u8> {
    canonical_encode(&json!({
        "tree_size": tree_size,
        "root_hash": hex::encode(root_hash),
        "timestamp": timestamp,
    }))
    .expect("integers and strings encode")
}

impl SignedTreeHead {
    pub fn sign(tree_size: u64, root_hash: Digest, timestamp: i64, key: &BrokerKey) -> Self {
        let sig: Signature = key.signing.sign(&sth_signing_bytes(tree_size, &root_hash, timestamp));
        Self { tree_size, root_hash, timestamp, signature: b64(&sig.to_bytes()), key_id: key.kid.clone() }
    }

    pub fn verify_signature(&self, jwks: &Jwks) -> Result<(), SthError> {
        let key = jwks.find_for(&self.key_id, KeyPurpose::SthSigning).ok_or_else(|| SthError::UnknownKey(self.key_id.clone()))?;
        let sig = unb64(&self.signature).and_then(|b| Signature::from_slice(&b).ok()).ok_or(SthError::BadSignature)?;
        key.verify(&sth_signing_bytes(self.tree_size, &self.root_hash, self.timestamp), &sig).map_err(|_| SthError::BadSignature)
    }
}

/// Signs the ledger's current head.
pub fn publish_sth(ledger: &Ledger, key: &BrokerKey, now_ms: i64) -> SignedTreeHead {
    let (size, root) = ledger.head();
    SignedTreeHead::sign(size, root, now_ms, key)
}

/// True iff the STH signature verifies, the proof is for the STH's size,
/// and the audit path leads from `leaf_digest` to the STH root.
pub fn verify_inclusion(proof: &InclusionProof, leaf_digest: &Digest, sth: &SignedTreeHead, jwks: &Jwks) -> bool {
    sth.verify_signature(jwks).is_ok()
        && proof.tree_size == sth.tree_size
        && merkle::verify_inclusion_path(proof.leaf_index, proof.tree_size, leaf_digest, &proof.audit_path, &sth.root_hash)
}

/// True iff both STH signatures verify and the proof shows `old` is a prefix
/// of `new`.
pub fn verify_consistency(proof: &ConsistencyProof, old: &SignedTreeHead, new: &SignedTreeHead, jwks: &Jwks) -> bool {
    old.verify_signature(jwks).is_ok()
        && new.verify_signature(jwks).is_ok()
        && proof.old_size == old.tree_size
        && proof.new_size == new.tree_size
        && merkle::verify_consistency_path(old.tree_size, new.tree_size, &old.root_hash, &new.root_hash, &proof.path)
}

/// Publication schedule: every `interval_ms`, or once `max_appends` leaves
/// have accumulated since the last head, whichever comes first.
#[derive(Debug, Clone, Copy)]
pub struct SthCadence {
    pub interval_ms: i64,
    pub max_appends: u64,
}

impl Default for SthCadence {
    fn default() -> Self {
        Self { interval_ms: 60_000, max_appends: 1000 }
    }
}

impl SthCadence {
    pub fn due(&self, last: Option<&SignedTreeHead>, current_size: u64, now_ms: i64) -> bool {
        match last {
            None => true,
            Some(s) => now_ms - s.timestamp >= self.interval_ms || current_size.saturating_sub(s.tree_size) >= self.max_appends,
        }
    }
}

/// Every published STH, optionally persisted in the record-log format.
#[derive(Debug, Default)]
pub struct SthHistory {
    heads: RwLock<Vec<SignedTreeHead>>,
    file: Mutex<Option<RecordLog>>,
}

impl SthHistory {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>, sync: bool) -> Result<Self, LogError> {
        let (log, recovered) = RecordLog::open(path, sync)?;
        let heads = recovered.records.iter().filter_map(|r| serde_json::from_slice(r).ok()).collect();
        Ok(Self { heads: RwLock::new(heads), file: Mutex::new(Some(log)) })
    }

    pub fn record(&self, sth: SignedTreeHead) -> Result<(), LogError> {
        let mut file = self.file.lock();
        if let Some(log) = file.as_mut() {
            log.append(&serde_json::to_vec(&sth).expect("sth serializes"))?;
        }
        self.heads.write().push(sth);
        Ok(())
    }

    pub fn latest(&self) -> Option<SignedTreeHead> {
        self.heads.read().last().cloned()
    }

    pub fn all(&self) -> Vec<SignedTreeHead> {
        self.heads.read().clone()
    }

    /// Drops heads that claim more leaves than `size`. Used after recovering
    /// a ledger whose tail was lost, so history never points past the log.
    pub fn retain_up_to(&self, size: u64) -> Result<(), LogError> {
        let mut file = self.file.lock();
        let mut heads = self.heads.write();
        if heads.iter().all(|h| h.tree_size <= size) {
            return Ok(());
        }
        heads.retain(|h| h.tree_size <= size);
        if let Some(log) = file.as_mut() {
            let records: Vec<Vec<u8>> = heads.iter().map(|h| serde_json::to_vec(h).expect("sth serializes")).collect();
            let path = log.path().to_path_buf();
            *log = RecordLog::rewrite(&path, &records, true)?;
        }
        Ok(())
    }
}
