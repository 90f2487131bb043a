//! Broker re-fetch audits of licensed content.
//!
//! Selection is a keyed hash of the transaction id, so anyone holding the
//! epoch salt can recompute which transactions were due. Results are ledger
//! entries; publisher health is a fold over them.

use std::collections::{BTreeMap, HashSet};

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ledger::{EntryType, Ledger, LedgerError, NewEntry, StoredEntry};
use crate::provenance::{fingerprint, stored_event, ProvenanceEventType};

pub const DEFAULT_RATE: f64 = 0.05;
pub const DEFAULT_ESCALATION_THRESHOLD: u32 = 3;
pub const SPOT_CHECK_HEADER: &str = "Aegon-Spot-Check";

/// `SHA-256(txn_id || salt)`, first 8 bytes big-endian, scaled to [0, 1),
/// compared against `rate`.
pub fn spot_check_select(txn_id: &str, epoch_salt: &[u8], rate: f64) -> bool {
    let mut h = Sha256::new();
    h.update(txn_id.as_bytes());
    h.update(epoch_salt);
    let d = h.finalize();
    let x = u64::from_be_bytes(d[..8].try_into().unwrap());
    (x as f64) / 18_446_744_073_709_551_616.0 < rate
}

/// Daily salt: HMAC of the UTC day number under a broker secret.
pub fn epoch_salt(secret: &[u8], now: i64) -> Vec<u8> {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("hmac key");
    mac.update(&now.div_euclid(86_400).to_be_bytes());
    mac.finalize().into_bytes().to_vec()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpotCheckPolicy {
    pub rate: f64,
    /// Publishers serving per-request content; never selected.
    pub dynamic_publishers: HashSet<String>,
}

impl SpotCheckPolicy {
    pub fn new(rate: f64) -> Self {
        Self { rate, dynamic_publishers: HashSet::new() }
    }

    pub fn selects(&self, txn_id: &str, publisher_domain: &str, epoch_salt: &[u8]) -> bool {
        !self.dynamic_publishers.contains(&publisher_domain.to_ascii_lowercase()) && spot_check_select(txn_id, epoch_salt, self.rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Mismatch,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpotCheckResult {
    pub txn_id: String,
    pub publisher_domain: String,
    pub broker_hash: Option<String>,
    pub publisher_hash: Option<String>,
    pub platform_hash: Option<String>,
    pub verdict: Verdict,
    pub checked_at: i64,
}

/// Verified iff broker and publisher hashes exist and every present hash is
/// equal; inconclusive when either of those two is missing.
pub fn verdict(broker: Option<&str>, publisher: Option<&str>, platform: Option<&str>) -> Verdict {
    match (broker, publisher) {
        (Some(b), Some(p)) if b == p && platform.is_none_or(|x| x == b) => Verdict::Verified,
        (Some(_), Some(_)) => Verdict::Mismatch,
        _ => Verdict::Inconclusive,
    }
}

pub trait ContentFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, String>;
}

#[derive(Debug, Error)]
pub enum SpotCheckError {
    #[error("no license for {0}")]
    UnknownTxn(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Resource URL and publisher domain recorded at issuance.
pub fn licensed_resource(entry: &StoredEntry) -> Option<(String, String)> {
    let claims = entry.entry.payload.get("claims")?;
    let url = claims.get("aegon_resource_url")?.as_str()?.to_string();
    let domain = url::Url::parse(&url).ok()?.host_str()?.to_ascii_lowercase();
    Some((url, domain))
}

fn reported_hashes(entries: &[std::sync::Arc<StoredEntry>]) -> (Option<String>, Option<String>) {
    let publisher = entries
        .iter()
        .find(|e| e.entry.entry_type == EntryType::ContentHashReported)
        .and_then(|e| e.entry.payload["content_sha256"].as_str().map(str::to_string));
    let platform = entries
        .iter()
        .filter_map(|e| stored_event(e))
        .find(|ev| ev.body.event_type == ProvenanceEventType::ContentFetched.as_str())
        .map(|ev| ev.body.content_fingerprint);
    (publisher, platform)
}

/// Fetches the licensed resource, compares the three hashes and appends the
/// result to the ledger.
pub fn run_spot_check(ledger: &Ledger, txn_id: &str, fetcher: &dyn ContentFetcher, now: i64) -> Result<(SpotCheckResult, u64), SpotCheckError> {
    let license = ledger.license_entry(txn_id).ok_or_else(|| SpotCheckError::UnknownTxn(txn_id.into()))?;
    let (url, domain) = licensed_resource(&license).ok_or_else(|| SpotCheckError::UnknownTxn(txn_id.into()))?;
    let (publisher_hash, platform_hash) = reported_hashes(&ledger.entries_for(txn_id));
    let broker_hash = fetcher.fetch(&url).ok().map(|b| fingerprint(&b));
    let result = SpotCheckResult {
        txn_id: txn_id.into(),
        publisher_domain: domain,
        verdict: verdict(broker_hash.as_deref(), publisher_hash.as_deref(), platform_hash.as_deref()),
        broker_hash,
        publisher_hash,
        platform_hash,
        checked_at: now,
    };
    let leaf = ledger.append(NewEntry {
        txn_id: txn_id.into(),
        entry_type: EntryType::SpotCheckResult,
        payload: serde_json::to_value(&result).expect("result serializes"),
        server_timestamp: now,
    })?;
    Ok((result, leaf))
}

/// Transactions with a publisher hash, selected by `policy`, and not yet
/// checked, in ledger order.
pub fn due_spot_checks(ledger: &Ledger, policy: &SpotCheckPolicy, epoch_salt: &[u8]) -> Vec<String> {
    let checked: HashSet<String> = ledger.entries_of_type(EntryType::SpotCheckResult).iter().map(|e| e.entry.txn_id.clone()).collect();
    let mut seen = HashSet::new();
    ledger
        .entries_of_type(EntryType::ContentHashReported)
        .iter()
        .filter(|e| !checked.contains(&e.entry.txn_id) && seen.insert(e.entry.txn_id.clone()))
        .filter(|e| {
            ledger
                .license_entry(&e.entry.txn_id)
                .and_then(|l| licensed_resource(&l))
                .is_some_and(|(_, domain)| policy.selects(&e.entry.txn_id, &domain, epoch_salt))
        })
        .map(|e| e.entry.txn_id.clone())
        .collect()
}

pub fn spot_check_results(ledger: &Ledger) -> Vec<SpotCheckResult> {
    ledger.entries_of_type(EntryType::SpotCheckResult).iter().filter_map(|e| serde_json::from_value(e.entry.payload.clone()).ok()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PublisherHealth {
    pub publisher_domain: String,
    pub consecutive_mismatches: u32,
    pub escalated: bool,
    pub checks: u64,
    pub mismatches: u64,
}

/// Folds spot-check results in ledger order: a mismatch increments the
/// streak, a verified result resets it, inconclusive leaves it alone.
/// Escalation is sticky once the streak reaches `threshold`.
pub fn publisher_health(results: &[SpotCheckResult], threshold: u32) -> Vec<PublisherHealth> {
    let mut by_domain: BTreeMap<String, PublisherHealth> = BTreeMap::new();
    for r in results {
        let h = by_domain
            .entry(r.publisher_domain.clone())
            .or_insert_with(|| PublisherHealth { publisher_domain: r.publisher_domain.clone(), ..Default::default() });
        h.checks += 1;
        match r.verdict {
            Verdict::Mismatch => {
                h.mismatches += 1;
                h.consecutive_mismatches += 1;
                if h.consecutive_mismatches >= threshold {
                    h.escalated = true;
                }
            }
            Verdict::Verified => h.consecutive_mismatches = 0,
            Verdict::Inconclusive => {}
        }
    }
    by_domain.into_values().collect()
}

/// Reads a `spot_check_result` payload.
pub fn parse_result(payload: &Value) -> Option<SpotCheckResult> {
    serde_json::from_value(payload.clone()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_extremes() {
        for i in 0..200 {
            let t = format!("txn_{i}");
            assert!(!spot_check_select(&t, b"s", 0.0));
            assert!(spot_check_select(&t, b"s", 1.0));
        }
    }

    #[test]
    fn selection_matches_independent_computation() {
        let d = Sha256::digest(b"txn_abcsalt");
        let x = u64::from_be_bytes(d[..8].try_into().unwrap());
        let frac = x as f64 / 2f64.powi(64);
        assert!(spot_check_select("txn_abc", b"salt", frac + 1e-9));
        assert!(!spot_check_select("txn_abc", b"salt", frac - 1e-9));
    }

    #[test]
    fn dynamic_publishers_never_selected() {
        let mut p = SpotCheckPolicy::new(1.0);
        p.dynamic_publishers.insert("live.example".into());
        assert!(!p.selects("txn_a", "LIVE.example", b"s"));
        assert!(p.selects("txn_a", "static.example", b"s"));
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(verdict(Some("a"), Some("a"), None), Verdict::Verified);
        assert_eq!(verdict(Some("a"), Some("a"), Some("a")), Verdict::Verified);
        assert_eq!(verdict(Some("a"), Some("a"), Some("b")), Verdict::Mismatch);
        assert_eq!(verdict(Some("a"), Some("b"), None), Verdict::Mismatch);
        assert_eq!(verdict(None, Some("a"), Some("a")), Verdict::Inconclusive);
        assert_eq!(verdict(Some("a"), None, Some("a")), Verdict::Inconclusive);
    }

    fn r(domain: &str, v: Verdict) -> SpotCheckResult {
        SpotCheckResult {
            txn_id: "t".into(),
            publisher_domain: domain.into(),
            broker_hash: None,
            publisher_hash: None,
            platform_hash: None,
            verdict: v,
            checked_at: 0,
        }
    }

    #[test]
    fn escalates_on_third_consecutive_mismatch() {
        use Verdict::*;
        let two = [r("p", Mismatch), r("p", Mismatch), r("p", Verified), r("p", Mismatch), r("p", Inconclusive), r("p", Mismatch)];
        let h = publisher_health(&two, 3);
        assert_eq!((h[0].consecutive_mismatches, h[0].escalated), (2, false));
        let three = [r("p", Mismatch), r("q", Mismatch), r("p", Mismatch), r("p", Mismatch)];
        let h = publisher_health(&three, 3);
        assert!(h[0].escalated && !h[1].escalated);
    }
}
