//! Encrypted, crash-safe FIFO of signed receipts awaiting upload.
//!
//! The journal is an append-only record file of ChaCha20-Poly1305 sealed
//! `enqueue`/`ack` operations; replaying it yields the pending set. It is
//! compacted to an empty file whenever the queue drains.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logfile::{LogError, RecordLog};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedReceipt {
    pub receipt_id: String,
    pub jws: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Op {
    Enqueue { receipt_id: String, jws: String },
    Ack { receipt_id: String },
}

#[derive(Debug, Error)]
pub enum QueueError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("journal record failed to decrypt")]
    Decrypt,
    #[error("journal record malformed: {0}")]
    Format(String),
}

struct Journal {
    log: RecordLog,
    path: PathBuf,
    cipher: ChaCha20Poly1305,
}

impl Journal {
    fn seal(&self, op: &Op) -> Vec<u8> {
        let mut nonce = [0u8; 12];
        OsRng.fill_bytes(&mut nonce);
        let plain = serde_json::to_vec(op).expect("op serializes");
        let mut out = nonce.to_vec();
        out.extend(self.cipher.encrypt(Nonce::from_slice(&nonce), plain.as_slice()).expect("encrypt"));
        out
    }

    fn open_record(cipher: &ChaCha20Poly1305, rec: &[u8]) -> Result<Op, QueueError> {
        if rec.len() < 12 {
            return Err(QueueError::Decrypt);
        }
        let (nonce, ct) = rec.split_at(12);
        let plain = cipher.decrypt(Nonce::from_slice(nonce), ct).map_err(|_| QueueError::Decrypt)?;
        serde_json::from_slice(&plain).map_err(|e| QueueError::Format(e.to_string()))
    }
}

pub struct OfflineQueue {
    pending: VecDeque<QueuedReceipt>,
    journal: Option<Journal>,
}

impl std::fmt::Debug for OfflineQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OfflineQueue").field("pending", &self.pending.len()).field("persistent", &self.journal.is_some()).finish()
    }
}

impl OfflineQueue {
    pub fn in_memory() -> Self {
        Self { pending: VecDeque::new(), journal: None }
    }

    /// Opens (or creates) the journal at `path` and replays it.
    pub fn open(path: &Path, key: &[u8; 32]) -> Result<Self, QueueError> {
        let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
        let (log, recovered) = RecordLog::open(path, true)?;
        let mut pending: VecDeque<QueuedReceipt> = VecDeque::new();
        for rec in &recovered.records {
            match Journal::open_record(&cipher, rec)? {
                Op::Enqueue { receipt_id, jws } => {
                    if !pending.iter().any(|q| q.receipt_id == receipt_id) {
                        pending.push_back(QueuedReceipt { receipt_id, jws });
                    }
                }
                Op::Ack { receipt_id } => pending.retain(|q| q.receipt_id != receipt_id),
            }
        }
        Ok(Self { pending, journal: Some(Journal { log, path: path.to_path_buf(), cipher }) })
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending(&self) -> impl Iterator<Item = &QueuedReceipt> {
        self.pending.iter()
    }

    /// Durably records a receipt before it counts as queued.
    pub fn enqueue(&mut self, receipt_id: &str, jws: &str) -> Result<(), QueueError> {
        if self.pending.iter().any(|q| q.receipt_id == receipt_id) {
            return Ok(());
        }
        if let Some(j) = &mut self.journal {
            let rec = j.seal(&Op::Enqueue { receipt_id: receipt_id.into(), jws: jws.into() });
            j.log.append(&rec)?;
        }
        self.pending.push_back(QueuedReceipt { receipt_id: receipt_id.into(), jws: jws.into() });
        Ok(())
    }

    /// Drops acknowledged receipts; compacts the journal once empty.
    pub fn ack(&mut self, receipt_ids: &[String]) -> Result<(), QueueError> {
        if receipt_ids.is_empty() {
            return Ok(());
        }
        if let Some(j) = &mut self.journal {
            for id in receipt_ids {
                let rec = j.seal(&Op::Ack { receipt_id: id.clone() });
                j.log.append(&rec)?;
            }
        }
        self.pending.retain(|q| !receipt_ids.contains(&q.receipt_id));
        if self.pending.is_empty() {
            if let Some(j) = &mut self.journal {
                j.log = RecordLog::rewrite(&j.path, &[], true)?;
            }
        }
        Ok(())
    }

    /// The oldest `n` receipts, in enqueue order.
    pub fn front(&self, n: usize) -> Vec<QueuedReceipt> {
        self.pending.iter().take(n).cloned().collect()
    }

    pub fn journal_bytes(&self) -> Option<u64> {
        self.journal.as_ref().map(|j| j.log.byte_len())
    }
}
