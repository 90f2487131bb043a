//! Independent auditor for an Aegon broker.
//!
//! Everything the broker sends is re-verified locally: STH signatures
//! against the published JWKS, leaf hashes recomputed from raw entry bytes,
//! inclusion and consistency paths recomputed with the pure Merkle
//! functions. Seen tree heads are kept in an append-only local history so
//! equivocation and rollback show up across runs.

pub mod transport;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use aegon_core::keys::Jwks;
use aegon_core::ledger::{EntryType, LedgerEntry};
use aegon_core::logfile::{LogError, RecordLog};
use aegon_core::merkle::{digest_hex, leaf_hash, ConsistencyProof, InclusionProof};
use aegon_core::sth::{verify_consistency, verify_inclusion};
use aegon_core::SignedTreeHead;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

pub use transport::{Fetched, FixtureTransport, Fixtures, HttpTransport, RecordingTransport, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    VerifyFailed = 1,
    NotFound = 2,
    Transport = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub exit: Exit,
    pub lines: Vec<String>,
    pub details: Value,
}

impl Report {
    pub fn code(&self) -> i32 {
        self.exit as i32
    }

    pub fn to_json(&self, command: &str) -> Value {
        json!({"command": command, "exit_code": self.code(), "lines": self.lines, "details": self.details})
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Failure {
    Transport(String),
    NotFound(String),
    Verify(String),
}

impl Failure {
    fn into_report(self, mut lines: Vec<String>) -> Report {
        let (exit, line) = match self {
            Failure::Transport(m) => (Exit::Transport, format!("TRANSPORT ERROR: {m}")),
            Failure::NotFound(m) => (Exit::NotFound, format!("NOT FOUND: {m}")),
            Failure::Verify(m) => (Exit::VerifyFailed, m),
        };
        lines.push(line);
        Report { exit, lines, details: Value::Null }
    }
}

/// Seen tree heads, append-only, in the record-log format.
#[derive(Debug)]
pub struct AuditorState {
    history: Vec<SignedTreeHead>,
    log: Option<RecordLog>,
    journal: Option<PathBuf>,
}

impl AuditorState {
    pub fn in_memory() -> Self {
        Self { history: Vec::new(), log: None, journal: None }
    }

    pub fn open(dir: &Path) -> Result<Self, LogError> {
        std::fs::create_dir_all(dir)?;
        let (log, recovered) = RecordLog::open(dir.join("sth-history.aegl"), true)?;
        let history = recovered.records.iter().filter_map(|r| serde_json::from_slice(r).ok()).collect();
        Ok(Self { history, log: Some(log), journal: Some(dir.join("verification.log")) })
    }

    pub fn history(&self) -> &[SignedTreeHead] {
        &self.history
    }

    /// Largest stored tree head (latest among equals).
    pub fn latest(&self) -> Option<&SignedTreeHead> {
        self.history.iter().max_by_key(|s| (s.tree_size, s.timestamp))
    }

    fn store(&mut self, sth: &SignedTreeHead) -> Result<(), Failure> {
        if self.history.contains(sth) {
            return Ok(());
        }
        if let Some(log) = &mut self.log {
            log.append(&serde_json::to_vec(sth).expect("sth serializes")).map_err(|e| Failure::Transport(format!("state: {e}")))?;
        }
        self.history.push(sth.clone());
        Ok(())
    }

    fn conflicting(&self, sth: &SignedTreeHead) -> Option<&SignedTreeHead> {
        self.history.iter().find(|h| h.tree_size == sth.tree_size && h.root_hash != sth.root_hash)
    }

    fn journal(&self, lines: &[String]) {
        if let Some(p) = &self.journal {
            if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(p) {
                for l in lines {
                    let _ = writeln!(f, "{l}");
                }
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct EntryBytes {
    leaf_index: u64,
    entry_type: EntryType,
    entry_hex: String,
}

pub struct Auditor<T> {
    transport: T,
    state: AuditorState,
}

impl<T: Transport> Auditor<T> {
    pub fn new(transport: T, state: AuditorState) -> Self {
        Self { transport, state }
    }

    pub fn state(&self) -> &AuditorState {
        &self.state
    }

    fn fetch<V: DeserializeOwned>(&self, path: &str) -> Result<V, Failure> {
        let r = self.transport.get(path).map_err(|e| Failure::Transport(e.0))?;
        match r.status {
            200 => serde_json::from_slice(&r.body).map_err(|e| Failure::Verify(format!("MALFORMED RESPONSE from {path}: {e}"))),
            404 => Err(Failure::NotFound(path.to_string())),
            s => Err(Failure::Transport(format!("{path} returned HTTP {s}"))),
        }
    }

    /// Fetches the current STH and JWKS, checks the signature, records the
    /// head and checks it against history for equivocation.
    fn fetch_verified_sth(&mut self) -> Result<(SignedTreeHead, Jwks), Failure> {
        let jwks: Jwks = self.fetch("/.well-known/jwks.json")?;
        let sth: SignedTreeHead = self.fetch("/v1/sth")?;
        sth.verify_signature(&jwks).map_err(|e| Failure::Verify(format!("bad STH signature: {e} (tree_size {})", sth.tree_size)))?;
        let conflict = self.state.conflicting(&sth).cloned();
        self.state.store(&sth)?;
        if let Some(old) = conflict {
            return Err(Failure::Verify(format!(
                "EQUIVOCATION: tree_size {} signed with roots {} and {}",
                sth.tree_size,
                digest_hex(&old.root_hash),
                digest_hex(&sth.root_hash)
            )));
        }
        Ok((sth, jwks))
    }

    fn check_consistency(&self, old: &SignedTreeHead, new: &SignedTreeHead, jwks: &Jwks) -> Result<String, Failure> {
        if new.tree_size < old.tree_size {
            return Err(Failure::Verify(format!("ROLLBACK: tree_size {} is smaller than previously seen {}", new.tree_size, old.tree_size)));
        }
        if new.tree_size == old.tree_size {
            return if new.root_hash == old.root_hash {
                Ok(format!("CONSISTENT {} -> {}", old.tree_size, new.tree_size))
            } else {
                Err(Failure::Verify(format!(
                    "EQUIVOCATION: tree_size {} signed with roots {} and {}",
                    new.tree_size,
                    digest_hex(&old.root_hash),
                    digest_hex(&new.root_hash)
                )))
            };
        }
        let proof: ConsistencyProof = self.fetch(&format!("/v1/consistency?old={}&new={}", old.tree_size, new.tree_size))?;
        if proof.old_size != old.tree_size || proof.new_size != new.tree_size || !verify_consistency(&proof, old, new, jwks) {
            return Err(Failure::Verify(format!("INCONSISTENT: tree_size {} is not an append-only extension of {}", new.tree_size, old.tree_size)));
        }
        Ok(format!("CONSISTENT {} -> {}", old.tree_size, new.tree_size))
    }

    fn finish(&self, result: Result<(Vec<String>, Value), (Failure, Vec<String>)>) -> Report {
        let report = match result {
            Ok((lines, details)) => Report { exit: Exit::Ok, lines, details },
            Err((f, lines)) => f.into_report(lines),
        };
        self.state.journal(&report.lines);
        report
    }

    pub fn cmd_sth(&mut self) -> Report {
        let r = self
            .fetch_verified_sth()
            .map(|(sth, _)| (vec![format!("STH OK tree_size {} root {}", sth.tree_size, digest_hex(&sth.root_hash))], serde_json::to_value(&sth).unwrap()));
        self.finish(r.map_err(|f| (f, vec![])))
    }

    pub fn cmd_verify_inclusion(&mut self, txn_id: &str) -> Report {
        let r = self.verify_inclusion(txn_id);
        self.finish(r.map_err(|f| (f, vec![])))
    }

    fn verify_inclusion(&mut self, txn_id: &str) -> Result<(Vec<String>, Value), Failure> {
        let (sth, jwks) = self.fetch_verified_sth()?;
        let entries: Vec<EntryBytes> = self.fetch(&format!("/v1/entries/{txn_id}")).map_err(|f| match f {
            Failure::NotFound(_) => Failure::NotFound(format!("txn {txn_id}")),
            other => other,
        })?;
        let license = entries
            .iter()
            .find(|e| e.entry_type == EntryType::LicenseIssued)
            .ok_or_else(|| Failure::NotFound(format!("no license_issued entry for {txn_id}")))?;
        let bytes = hex::decode(&license.entry_hex).map_err(|_| Failure::Verify("INVALID ENTRY: entry bytes are not hex".into()))?;
        let decoded = LedgerEntry::decode(&bytes).map_err(|e| Failure::Verify(format!("INVALID ENTRY: {e}")))?;
        if decoded.txn_id != txn_id || decoded.leaf_index != license.leaf_index || decoded.entry_type != EntryType::LicenseIssued {
            return Err(Failure::Verify("INVALID ENTRY: bytes describe a different leaf".into()));
        }
        let i = license.leaf_index;
        if i >= sth.tree_size {
            return Err(Failure::Verify(format!("NOT YET COMMITTED: leaf {i} is beyond tree_size {}", sth.tree_size)));
        }
        let proof: InclusionProof = self.fetch(&format!("/v1/proof?leaf_index={i}&tree_size={}", sth.tree_size))?;
        if proof.leaf_index != i || !verify_inclusion(&proof, &leaf_hash(&bytes), &sth, &jwks) {
            return Err(Failure::Verify("INVALID PROOF".into()));
        }
        Ok((
            vec![format!("INCLUDED at index {i}, tree_size {}", sth.tree_size)],
            json!({"txn_id": txn_id, "leaf_index": i, "tree_size": sth.tree_size, "root_hash": sth.root_hash}),
        ))
    }

    /// With no sizes: the largest stored head against a freshly fetched one.
    /// With sizes: two stored heads of those sizes.
    pub fn cmd_consistency(&mut self, old: Option<u64>, new: Option<u64>) -> Report {
        let r = self.consistency(old, new);
        self.finish(r.map_err(|f| (f, vec![])))
    }

    fn stored_of_size(&self, size: u64) -> Result<SignedTreeHead, Failure> {
        self.state
            .history
            .iter()
            .filter(|s| s.tree_size == size)
            .max_by_key(|s| s.timestamp)
            .cloned()
            .ok_or_else(|| Failure::NotFound(format!("no stored STH with tree_size {size}")))
    }

    fn consistency(&mut self, old: Option<u64>, new: Option<u64>) -> Result<(Vec<String>, Value), Failure> {
        let (old_sth, new_sth, jwks) = match (old, new) {
            (Some(o), Some(n)) => {
                let jwks: Jwks = self.fetch("/.well-known/jwks.json")?;
                (self.stored_of_size(o)?, self.stored_of_size(n)?, jwks)
            }
            (Some(o), None) => {
                let old = self.stored_of_size(o)?;
                let (new, jwks) = self.fetch_verified_sth()?;
                (old, new, jwks)
            }
            (None, _) => {
                let previous = self.state.latest().cloned();
                let (new, jwks) = self.fetch_verified_sth()?;
                match previous {
                    Some(p) => (p, new, jwks),
                    None => return Ok((vec![format!("NO HISTORY: stored tree_size {} as baseline", new.tree_size)], json!({"tree_size": new.tree_size}))),
                }
            }
        };
        old_sth.verify_signature(&jwks).map_err(|e| Failure::Verify(format!("bad STH signature on stored head: {e}")))?;
        new_sth.verify_signature(&jwks).map_err(|e| Failure::Verify(format!("bad STH signature: {e}")))?;
        let line = self.check_consistency(&old_sth, &new_sth, &jwks)?;
        Ok((vec![line], json!({"old_size": old_sth.tree_size, "new_size": new_sth.tree_size})))
    }

    /// Polls the broker `cycles` times (forever when `None`), checking each
    /// head against the previous one. Alerts are printed as they happen.
    pub fn cmd_watch(&mut self, interval: Duration, cycles: Option<u64>, sleep: &dyn Fn(Duration), mut emit: impl FnMut(&str)) -> Report {
        let mut lines = Vec::new();
        let mut alerts = 0u64;
        let mut transport_errors = 0u64;
        let mut cycle = 0u64;
        loop {
            cycle += 1;
            let previous = self.state.latest().cloned();
            let line = match self.fetch_verified_sth().and_then(|(sth, jwks)| match &previous {
                Some(p) => self.check_consistency(p, &sth, &jwks),
                None => Ok(format!("baseline tree_size {}", sth.tree_size)),
            }) {
                Ok(l) => format!("cycle {cycle}: {l}"),
                Err(Failure::Transport(m)) => {
                    transport_errors += 1;
                    format!("cycle {cycle}: ALERT transport: {m}")
                }
                Err(Failure::NotFound(m) | Failure::Verify(m)) => {
                    alerts += 1;
                    format!("cycle {cycle}: ALERT {m}")
                }
            };
            emit(&line);
            lines.push(line);
            if cycles.is_some_and(|c| cycle >= c) {
                break;
            }
            sleep(interval);
        }
        let exit = if alerts > 0 {
            Exit::VerifyFailed
        } else if transport_errors > 0 {
            Exit::Transport
        } else {
            Exit::Ok
        };
        let report = Report { exit, lines, details: json!({"cycles": cycle, "alerts": alerts, "transport_errors": transport_errors}) };
        self.state.journal(&report.lines);
        report
    }
}
