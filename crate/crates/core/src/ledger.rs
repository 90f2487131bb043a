//! The append-only transaction ledger: write-once entries committed into a
//! Merkle tree, with an in-memory index rebuilt from the record log on open.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{canonical_encode_serialize, EncodingError};
use crate::logfile::{LogError, RecordLog};
use crate::merkle::{leaf_hash, ConsistencyProof, Digest, InclusionProof, MerkleError, MerkleTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryType {
    LicenseIssued,
    ContentHashReported,
    ProvenanceEvent,
    ReceiptAccepted,
    SpotCheckResult,
}

impl EntryType {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LicenseIssued => "license_issued",
            Self::ContentHashReported => "content_hash_reported",
            Self::ProvenanceEvent => "provenance_event",
            Self::ReceiptAccepted => "receipt_accepted",
            Self::SpotCheckResult => "spot_check_result",
        }
    }
}

/// One committed ledger row. The leaf bytes are the canonical encoding of
/// all five fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub txn_id: String,
    pub entry_type: EntryType,
    pub payload: Value,
    pub server_timestamp: i64,
    pub leaf_index: u64,
}

impl LedgerEntry {
    pub fn encode(&self) -> Result<Vec<u8>, EncodingError> {
        canonical_encode_serialize(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// An entry as submitted, before its leaf index is assigned.
#[derive(Debug, Clone)]
pub struct NewEntry {
    pub txn_id: String,
    pub entry_type: EntryType,
    pub payload: Value,
    pub server_timestamp: i64,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("txn {0} already has a license_issued entry")]
    Conflict(String),
    #[error("txn {0} has no license_issued entry")]
    NotFound(String),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("storage: {0}")]
    Storage(#[from] LogError),
    #[error("ledger record {index} is not a valid entry: {reason}")]
    BadRecord { index: usize, reason: String },
}

/// Durable backing for ledger leaves. `append` must not return until the
/// record is persisted.
pub trait LedgerStore: Send {
    fn append(&mut self, record: &[u8]) -> Result<(), LedgerError>;
}

impl LedgerStore for RecordLog {
    fn append(&mut self, record: &[u8]) -> Result<(), LedgerError> {
        RecordLog::append(self, record).map_err(LedgerError::from)
    }
}

/// Volatile store for tests and benchmarks.
#[derive(Debug, Default)]
pub struct MemoryStore {
    pub records: Vec<Vec<u8>>,
}

impl LedgerStore for MemoryStore {
    fn append(&mut self, record: &[u8]) -> Result<(), LedgerError> {
        self.records.push(record.to_vec());
        Ok(())
    }
}

/// A committed entry together with its exact leaf bytes.
#[derive(Debug, Clone)]
pub struct StoredEntry {
    pub entry: LedgerEntry,
    pub bytes: Vec<u8>,
}

impl StoredEntry {
    pub fn leaf_hash(&self) -> Digest {
        leaf_hash(&self.bytes)
    }
}

#[derive(Default)]
struct State {
    tree: MerkleTree,
    entries: Vec<Arc<StoredEntry>>,
    licenses: HashMap<String, u64>,
    by_txn: HashMap<String, Vec<u64>>,
}

impl State {
    fn check(&self, e: &NewEntry) -> Result<(), LedgerError> {
        match e.entry_type {
            EntryType::LicenseIssued if self.licenses.contains_key(&e.txn_id) => Err(LedgerError::Conflict(e.txn_id.clone())),
            EntryType::LicenseIssued => Ok(()),
            _ if !self.licenses.contains_key(&e.txn_id) => Err(LedgerError::NotFound(e.txn_id.clone())),
            _ => Ok(()),
        }
    }

    fn push(&mut self, stored: StoredEntry) {
        let idx = stored.entry.leaf_index;
        self.tree.push(stored.leaf_hash());
        if stored.entry.entry_type == EntryType::LicenseIssued {
            self.licenses.insert(stored.entry.txn_id.clone(), idx);
        }
        self.by_txn.entry(stored.entry.txn_id.clone()).or_default().push(idx);
        self.entries.push(Arc::new(stored));
    }
}

/// Single-writer, many-reader ledger. Appends are serialized by the writer
/// lock; readers see a tree that only ever grows, so any read at size `n`
/// is unaffected by concurrent appends.
pub struct Ledger {
    state: RwLock<State>,
    writer: Mutex<Box<dyn LedgerStore>>,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").field("size", &self.size()).finish()
    }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self::with_store(Box::new(MemoryStore::default()), Vec::new()).expect("empty ledger")
    }

    /// Opens the ledger file at `path`, recovering any torn tail and
    /// rebuilding the index and tree.
    pub fn open(path: impl AsRef<Path>, sync: bool) -> Result<Self, LedgerError> {
        let (log, recovered) = RecordLog::open(path, sync)?;
        Self::with_store(Box::new(log), recovered.records)
    }

    pub fn with_store(store: Box<dyn LedgerStore>, existing: Vec<Vec<u8>>) -> Result<Self, LedgerError> {
        let mut state = State::default();
        for (i, bytes) in existing.into_iter().enumerate() {
            let entry = LedgerEntry::decode(&bytes).map_err(|e| LedgerError::BadRecord { index: i, reason: e.to_string() })?;
            if entry.leaf_index != i as u64 {
                return Err(LedgerError::BadRecord { index: i, reason: format!("leaf_index {}", entry.leaf_index) });
            }
            let new = NewEntry { txn_id: entry.txn_id.clone(), entry_type: entry.entry_type, payload: Value::Null, server_timestamp: 0 };
            state.check(&new).map_err(|e| LedgerError::BadRecord { index: i, reason: e.to_string() })?;
            state.push(StoredEntry { entry, bytes });
        }
        Ok(Self { state: RwLock::new(state), writer: Mutex::new(store) })
    }

    /// Appends an entry and returns its leaf index. The record is durable
    /// before the tree (and therefore any reader) can see it.
    pub fn append(&self, new: NewEntry) -> Result<u64, LedgerError> {
        let mut writer = self.writer.lock();
        let leaf_index = {
            let state = self.state.read();
            state.check(&new)?;
            state.entries.len() as u64
        };
        let entry = LedgerEntry { txn_id: new.txn_id, entry_type: new.entry_type, payload: new.payload, server_timestamp: new.server_timestamp, leaf_index };
        let bytes = entry.encode()?;
        writer.append(&bytes)?;
        self.state.write().push(StoredEntry { entry, bytes });
        Ok(leaf_index)
    }

    pub fn size(&self) -> u64 {
        self.state.read().entries.len() as u64
    }

    pub fn root_hash(&self, tree_size: u64) -> Result<Digest, LedgerError> {
        Ok(self.state.read().tree.root(tree_size)?)
    }

    /// Current size and root, read under one lock.
    pub fn head(&self) -> (u64, Digest) {
        let state = self.state.read();
        let size = state.tree.len();
        (size, state.tree.root(size).expect("current size"))
    }

    pub fn entry(&self, leaf_index: u64) -> Option<Arc<StoredEntry>> {
        self.state.read().entries.get(leaf_index as usize).cloned()
    }

    /// The license_issued entry for `txn_id`.
    pub fn license_entry(&self, txn_id: &str) -> Option<Arc<StoredEntry>> {
        let state = self.state.read();
        state.licenses.get(txn_id).map(|i| state.entries[*i as usize].clone())
    }

    pub fn has_license(&self, txn_id: &str) -> bool {
        self.state.read().licenses.contains_key(txn_id)
    }

    /// Every entry for `txn_id` in append order.
    pub fn entries_for(&self, txn_id: &str) -> Vec<Arc<StoredEntry>> {
        let state = self.state.read();
        state.by_txn.get(txn_id).map(|ix| ix.iter().map(|i| state.entries[*i as usize].clone()).collect()).unwrap_or_default()
    }

    /// Snapshot of all entries of one type, in append order.
    pub fn entries_of_type(&self, entry_type: EntryType) -> Vec<Arc<StoredEntry>> {
        self.state.read().entries.iter().filter(|e| e.entry.entry_type == entry_type).cloned().collect()
    }

    pub fn inclusion_proof(&self, leaf_index: u64, tree_size: u64) -> Result<InclusionProof, LedgerError> {
        let audit_path = self.state.read().tree.inclusion_path(leaf_index, tree_size)?;
        Ok(InclusionProof { leaf_index, tree_size, audit_path })
    }

    /// Inclusion proof for the license_issued entry of `txn_id`.
    pub fn inclusion_proof_for_txn(&self, txn_id: &str, tree_size: u64) -> Result<InclusionProof, LedgerError> {
        let idx = *self.state.read().licenses.get(txn_id).ok_or_else(|| LedgerError::NotFound(txn_id.to_string()))?;
        self.inclusion_proof(idx, tree_size)
    }

    pub fn consistency_proof(&self, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LedgerError> {
        let path = self.state.read().tree.consistency_path(old_size, new_size)?;
        Ok(ConsistencyProof { old_size, new_size, path })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merkle::verify_inclusion_path;
    use serde_json::json;

    fn license(txn: &str) -> NewEntry {
        NewEntry { txn_id: txn.into(), entry_type: EntryType::LicenseIssued, payload: json!({"k": txn}), server_timestamp: 10 }
    }

    #[test]
    fn first_append_is_index_zero() {
        let l = Ledger::in_memory();
        assert_eq!(l.append(license("txn_a")).unwrap(), 0);
        assert_eq!(l.append(license("txn_b")).unwrap(), 1);
        assert_eq!(l.size(), 2);
    }

    #[test]
    fn duplicate_license_conflicts() {
        let l = Ledger::in_memory();
        l.append(license("txn_a")).unwrap();
        assert!(matches!(l.append(license("txn_a")), Err(LedgerError::Conflict(_))));
        assert_eq!(l.size(), 1);
    }

    #[test]
    fn dependent_entry_requires_license() {
        let l = Ledger::in_memory();
        let e = NewEntry { txn_id: "txn_x".into(), entry_type: EntryType::ContentHashReported, payload: json!({}), server_timestamp: 1 };
        assert!(matches!(l.append(e.clone()), Err(LedgerError::NotFound(_))));
        l.append(license("txn_x")).unwrap();
        assert_eq!(l.append(e.clone()).unwrap(), 1);
        assert_eq!(l.append(e).unwrap(), 2);
        assert_eq!(l.entries_for("txn_x").len(), 3);
    }

    #[test]
    fn root_out_of_range() {
        let l = Ledger::in_memory();
        assert!(matches!(l.root_hash(1), Err(LedgerError::Merkle(MerkleError::SizeOutOfRange { .. }))));
    }

    #[test]
    fn reopen_rebuilds_same_root() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.aegl");
        let root = {
            let l = Ledger::open(&p, true).unwrap();
            for i in 0..20 {
                l.append(license(&format!("txn_{i}"))).unwrap();
            }
            l.root_hash(20).unwrap()
        };
        let l = Ledger::open(&p, true).unwrap();
        assert_eq!(l.size(), 20);
        assert_eq!(l.root_hash(20).unwrap(), root);
        let p5 = l.inclusion_proof_for_txn("txn_5", 20).unwrap();
        let leaf = l.license_entry("txn_5").unwrap().leaf_hash();
        assert!(verify_inclusion_path(5, 20, &leaf, &p5.audit_path, &root));
    }

    #[test]
    fn leaf_bytes_are_canonical() {
        let l = Ledger::in_memory();
        l.append(license("txn_a")).unwrap();
        let e = l.entry(0).unwrap();
        assert_eq!(
            String::from_utf8(e.bytes.clone()).unwrap(),
            r#"{"entry_type":"license_issued","leaf_index":0,"payload":{"k":"txn_a"},"server_timestamp":10,"txn_id":"txn_a"}"#
        );
    }
}
