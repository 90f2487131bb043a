//! Broker state and operations, independent of the HTTP layer.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use aegon_core::attestation::{
    decode_challenge, encode_challenge, is_content_hash, AttestationChain, ChallengeStore, DeviceRecord, DeviceRegistry, ReceiptError, ReceiptItemResult,
    ReceiptVerifier, RegistrationError, CHALLENGE_TTL,
};
use aegon_core::clock::Clock;
use aegon_core::device::MAX_BATCH;
use aegon_core::edge::{ContentHashReport, HashAck};
use aegon_core::keys::{BrokerKeySet, Jwk, Jwks, KeyPurpose};
use aegon_core::merkle::{ConsistencyProof, InclusionProof};
use aegon_core::provenance::{ChainStatus, ProvenanceError, ProvenanceLog, RecordAck, SignedEvent};
use aegon_core::spotcheck::{
    due_spot_checks, epoch_salt, licensed_resource, publisher_health, run_spot_check, spot_check_results, ContentFetcher, PublisherHealth, SpotCheckPolicy,
    SpotCheckResult, DEFAULT_ESCALATION_THRESHOLD, DEFAULT_RATE,
};
use aegon_core::sth::{publish_sth, SthCadence, SthHistory};
use aegon_core::token::{issue_token, IssueError, IssuedToken, LicenseRequest, TokenPolicy};
use aegon_core::{EntryType, Ledger, LedgerError, SignedTreeHead};
use p256::ecdsa::VerifyingKey;
use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    /// Overrides `<data_dir>/keys.json`.
    pub key_store: Option<PathBuf>,
    pub sth_cadence: SthCadence,
    pub spot_check_rate: f64,
    pub spot_check_secret: Vec<u8>,
    pub dynamic_publishers: HashSet<String>,
    pub escalation_threshold: u32,
    pub skew_threshold: i64,
    pub trust_roots: Vec<Jwk>,
    pub platforms: BTreeMap<String, Jwk>,
    pub token_policy: TokenPolicy,
    pub admin_token: Option<String>,
    /// Seeds the broker RNG (ids, keys, challenges) for reproducible runs.
    pub seed: Option<u64>,
    pub fsync: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            key_store: None,
            sth_cadence: SthCadence::default(),
            spot_check_rate: DEFAULT_RATE,
            spot_check_secret: b"aegon-spot-check".to_vec(),
            dynamic_publishers: HashSet::new(),
            escalation_threshold: DEFAULT_ESCALATION_THRESHOLD,
            skew_threshold: 300,
            trust_roots: Vec::new(),
            platforms: BTreeMap::new(),
            token_policy: TokenPolicy::default(),
            admin_token: None,
            seed: None,
            fsync: true,
        }
    }
}

/// Error body `{error_code, message}` plus the HTTP status to send.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{error_code}: {message}")]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error_code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self { status, error_code: code.to_string(), message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(400, "validation", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(500, "internal", message)
    }
}

impl From<LedgerError> for ApiError {
    fn from(e: LedgerError) -> Self {
        match e {
            LedgerError::NotFound(m) => Self::not_found(m),
            LedgerError::Conflict(m) => Self::new(409, "conflict", m),
            LedgerError::Merkle(m) => Self::new(400, "out_of_range", m.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("storage: {0}")]
    Storage(String),
    #[error("keys: {0}")]
    Keys(#[from] aegon_core::keys::KeyError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub jwks_requests: AtomicU64,
    pub licenses_issued: AtomicU64,
    pub spot_checks_run: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeResponse {
    pub challenge: String,
    pub expires_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterDevice {
    pub chain: AttestationChain,
    pub challenge: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterPlatform {
    pub platform_id: String,
    pub public_key: Jwk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryBytes {
    pub leaf_index: u64,
    pub entry_type: EntryType,
    /// Exact leaf bytes, hex encoded; the leaf hash is SHA-256(0x00 || bytes).
    pub entry_hex: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueResponse {
    pub token: String,
    pub txn_id: String,
    pub leaf_index: u64,
    pub expires_at: i64,
}

impl From<IssuedToken> for IssueResponse {
    fn from(t: IssuedToken) -> Self {
        Self { expires_at: t.claims.exp, token: t.token, txn_id: t.txn_id, leaf_index: t.leaf_index }
    }
}

pub enum ProofTarget<'a> {
    Txn(&'a str),
    Leaf(u64),
}

pub struct Broker {
    config: BrokerConfig,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha20Rng>,
    keys: RwLock<BrokerKeySet>,
    key_path: Option<PathBuf>,
    ledger: Ledger,
    sth: SthHistory,
    sth_lock: Mutex<()>,
    provenance: ProvenanceLog,
    platforms: Mutex<BTreeMap<String, Jwk>>,
    devices: DeviceRegistry,
    challenges: ChallengeStore,
    receipts: ReceiptVerifier,
    hash_lock: Mutex<()>,
    spot_lock: Mutex<()>,
    spot_policy: SpotCheckPolicy,
    fetcher: Arc<dyn ContentFetcher>,
    trust_roots: Vec<VerifyingKey>,
    stats: BrokerStats,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker").field("tree_size", &self.ledger.size()).field("data_dir", &self.config.data_dir).finish()
    }
}

fn data_path(dir: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    dir.as_ref().map(|d| d.join(name))
}

impl Broker {
    /// Opens (or initializes) broker state. With a data directory the
    /// ledger, STH history, keys, devices and platforms are recovered from
    /// disk; STHs beyond the recovered ledger are discarded.
    pub fn open(config: BrokerConfig, clock: Arc<dyn Clock>, fetcher: Arc<dyn ContentFetcher>) -> Result<Self, StartupError> {
        let mut rng = match config.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        if let Some(dir) = &config.data_dir {
            fs::create_dir_all(dir).map_err(|e| StartupError::Storage(e.to_string()))?;
        }
        let key_path = config.key_store.clone().or_else(|| data_path(&config.data_dir, "keys.json"));
        let keys = match &key_path {
            Some(p) => BrokerKeySet::load_or_generate(p, &mut rng)?,
            None => BrokerKeySet::generate(&mut rng),
        };
        let ledger = match data_path(&config.data_dir, "ledger.aegl") {
            Some(p) => Ledger::open(p, config.fsync)?,
            None => Ledger::in_memory(),
        };
        let sth = match data_path(&config.data_dir, "sth.aegl") {
            Some(p) => SthHistory::open(p, config.fsync).map_err(|e| StartupError::Storage(e.to_string()))?,
            None => SthHistory::in_memory(),
        };
        sth.retain_up_to(ledger.size()).map_err(|e| StartupError::Storage(e.to_string()))?;
        let devices = match data_path(&config.data_dir, "devices.json") {
            Some(p) => DeviceRegistry::open(&p).map_err(|e| StartupError::Storage(e.to_string()))?,
            None => DeviceRegistry::in_memory(),
        };

        let mut platforms = config.platforms.clone();
        if let Some(p) = data_path(&config.data_dir, "platforms.json") {
            if let Ok(raw) = fs::read(&p) {
                let stored: BTreeMap<String, Jwk> = serde_json::from_slice(&raw).map_err(|e| StartupError::Storage(e.to_string()))?;
                platforms.extend(stored);
            }
        }
        let provenance = ProvenanceLog::new(config.skew_threshold);
        for (id, jwk) in &platforms {
            provenance.register_platform_jwk(id, jwk).map_err(|e| StartupError::Config(format!("platform {id}: {e}")))?;
        }
        let trust_roots =
            config.trust_roots.iter().map(|j| j.to_key()).collect::<Result<Vec<_>, _>>().map_err(|e| StartupError::Config(format!("trust root: {e}")))?;

        let receipts = ReceiptVerifier::rebuild(&ledger);
        let spot_policy =
            SpotCheckPolicy { rate: config.spot_check_rate, dynamic_publishers: config.dynamic_publishers.iter().map(|d| d.to_ascii_lowercase()).collect() };
        let broker = Self {
            clock,
            rng: Mutex::new(rng),
            keys: RwLock::new(keys),
            key_path,
            ledger,
            sth,
            sth_lock: Mutex::new(()),
            provenance,
            platforms: Mutex::new(platforms),
            devices,
            challenges: ChallengeStore::default(),
            receipts,
            hash_lock: Mutex::new(()),
            spot_lock: Mutex::new(()),
            spot_policy,
            fetcher,
            trust_roots,
            stats: BrokerStats::default(),
            config,
        };
        broker.maybe_publish_sth().map_err(|e| StartupError::Storage(e.to_string()))?;
        Ok(broker)
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.stats
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    pub fn issue_license(&self, req: &LicenseRequest) -> Result<IssuedToken, ApiError> {
        let now = self.clock.now();
        let issued = {
            let keys = self.keys.read();
            let mut rng = self.rng.lock();
            issue_token(req, &keys, &self.ledger, &self.config.token_policy, &mut *rng, now)
        };
        let issued = issued.map_err(|e| match e {
            IssueError::Validation(m) => ApiError::validation(m),
            IssueError::Key(k) => ApiError::new(503, "key_unavailable", k.to_string()),
            IssueError::Ledger(l) => ApiError::new(503, "ledger_unavailable", l.to_string()),
        })?;
        self.stats.licenses_issued.fetch_add(1, Ordering::Relaxed);
        self.after_append()?;
        Ok(issued)
    }

    /// Records the publisher's hash of delivered content. Idempotent on
    /// `(txn_id, hash)`; a different hash for the same transaction conflicts.
    pub fn report_content_hash(&self, report: &ContentHashReport) -> Result<HashAck, ApiError> {
        if !is_content_hash(&format!("sha256:{}", report.content_sha256)) {
            return Err(ApiError::validation("content_sha256 must be 64 lowercase hex characters"));
        }
        let ack = {
            let _guard = self.hash_lock.lock();
            let Some(license) = self.ledger.license_entry(&report.txn_id) else {
                return Ok(HashAck::NotFound);
            };
            let domain = licensed_resource(&license).map(|(_, d)| d).unwrap_or_default();
            if domain != report.publisher_domain.to_ascii_lowercase() {
                return Err(ApiError::new(403, "wrong_publisher", format!("{} is not the licensed publisher", report.publisher_domain)));
            }
            let existing = self.ledger.entries_for(&report.txn_id).into_iter().find(|e| e.entry.entry_type == EntryType::ContentHashReported);
            if let Some(e) = existing {
                return if e.entry.payload["content_sha256"] == report.content_sha256.as_str() {
                    Ok(HashAck::Duplicate { leaf_index: e.entry.leaf_index })
                } else {
                    Err(ApiError::new(409, "hash_conflict", "a different content hash was already reported for this transaction"))
                };
            }
            let leaf_index = self.ledger.append(aegon_core::NewEntry {
                txn_id: report.txn_id.clone(),
                entry_type: EntryType::ContentHashReported,
                payload: json!({
                    "content_sha256": report.content_sha256,
                    "publisher_domain": report.publisher_domain.to_ascii_lowercase(),
                    "observed_at": report.observed_at,
                }),
                server_timestamp: self.clock.now(),
            })?;
            HashAck::Recorded { leaf_index }
        };
        self.after_append()?;
        Ok(ack)
    }

    pub fn record_provenance(&self, event: &SignedEvent) -> Result<RecordAck, ApiError> {
        let ack = self.provenance.record_event(&self.ledger, event, self.clock.now()).map_err(|e| match e {
            ProvenanceError::NotFound(m) => ApiError::not_found(format!("no license for {m}")),
            ProvenanceError::BadSignature => ApiError::new(401, "bad_signature", "platform signature does not verify"),
            ProvenanceError::Validation(m) => ApiError::validation(m),
            ProvenanceError::Ledger(l) => l.into(),
        })?;
        self.after_append()?;
        Ok(ack)
    }

    pub fn chain_status(&self, txn_id: &str) -> Result<ChainStatus, ApiError> {
        if !self.ledger.has_license(txn_id) {
            return Err(ApiError::not_found(format!("no license for {txn_id}")));
        }
        Ok(self.provenance.validate_chain(&self.ledger, txn_id))
    }

    pub fn rejected_provenance_signatures(&self) -> u64 {
        self.provenance.rejected_signatures()
    }

    /// Verifies up to 100 receipts; results are in input order.
    pub fn submit_receipts(&self, batch: &[String]) -> Result<Vec<ReceiptItemResult>, ApiError> {
        if batch.len() > MAX_BATCH {
            return Err(ApiError::validation(format!("at most {MAX_BATCH} receipts per batch")));
        }
        let now = self.clock.now();
        let mut out = Vec::with_capacity(batch.len());
        for jws in batch {
            out.push(match self.receipts.verify_receipt(jws, &self.ledger, &self.devices, now) {
                Ok(a) => ReceiptItemResult::Accepted { receipt_id: a.receipt_id, leaf_index: a.leaf_index },
                Err(ReceiptError::Rejected(reason)) => ReceiptItemResult::Rejected { reason },
                Err(ReceiptError::Ledger(e)) => return Err(e.into()),
            });
        }
        self.after_append()?;
        Ok(out)
    }

    pub fn issue_challenge(&self) -> ChallengeResponse {
        let now = self.clock.now();
        let c = self.challenges.issue(&mut *self.rng.lock(), now);
        ChallengeResponse { challenge: encode_challenge(&c), expires_at: now + CHALLENGE_TTL }
    }

    pub fn register_device(&self, req: &RegisterDevice) -> Result<DeviceRecord, ApiError> {
        let challenge = decode_challenge(&req.challenge).ok_or_else(|| ApiError::validation("challenge is not base64url"))?;
        self.devices.register(&self.challenges, &req.chain, &challenge, &self.trust_roots, self.clock.now()).map_err(registration_error)
    }

    pub fn revoke_device(&self, device_id: &str) -> Result<DeviceRecord, ApiError> {
        self.devices.revoke(device_id).map_err(registration_error)
    }

    pub fn device(&self, device_id: &str) -> Result<DeviceRecord, ApiError> {
        self.devices.get(device_id).ok_or_else(|| ApiError::not_found(format!("device {device_id}")))
    }

    /// Onboards a platform's provenance-signing key.
    pub fn register_platform(&self, req: &RegisterPlatform) -> Result<(), ApiError> {
        if req.platform_id.trim().is_empty() {
            return Err(ApiError::validation("platform_id is empty"));
        }
        self.provenance.register_platform_jwk(&req.platform_id, &req.public_key).map_err(|e| ApiError::validation(e.to_string()))?;
        let mut platforms = self.platforms.lock();
        platforms.insert(req.platform_id.clone(), req.public_key.clone());
        if let Some(p) = data_path(&self.config.data_dir, "platforms.json") {
            write_atomic(&p, &serde_json::to_vec_pretty(&*platforms).unwrap()).map_err(ApiError::internal)?;
        }
        Ok(())
    }

    pub fn jwks(&self) -> Jwks {
        self.stats.jwks_requests.fetch_add(1, Ordering::Relaxed);
        let mut keys = self.keys.write();
        keys.prune(self.clock.now());
        keys.jwks()
    }

    /// Retires the active token key (still published until its tokens
    /// expire) and activates a fresh one.
    pub fn rotate_token_key(&self) -> Result<String, ApiError> {
        let mut keys = self.keys.write();
        let kid = keys.rotate_token_key(&mut *self.rng.lock(), self.clock.now(), self.config.token_policy.max_ttl()).kid.clone();
        if let Some(p) = &self.key_path {
            keys.save(p).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        Ok(kid)
    }

    fn after_append(&self) -> Result<(), ApiError> {
        self.maybe_publish_sth().map(|_| ())
    }

    /// Publishes when the cadence says so; returns the new head if any.
    pub fn maybe_publish_sth(&self) -> Result<Option<SignedTreeHead>, ApiError> {
        if !self.config.sth_cadence.due(self.sth.latest().as_ref(), self.ledger.size(), self.clock.now_ms()) {
            return Ok(None);
        }
        let _guard = self.sth_lock.lock();
        if !self.config.sth_cadence.due(self.sth.latest().as_ref(), self.ledger.size(), self.clock.now_ms()) {
            return Ok(None);
        }
        self.publish_locked().map(Some)
    }

    pub fn publish_sth_now(&self) -> Result<SignedTreeHead, ApiError> {
        let _guard = self.sth_lock.lock();
        self.publish_locked()
    }

    fn publish_locked(&self) -> Result<SignedTreeHead, ApiError> {
        let keys = self.keys.read();
        let key = keys.active(KeyPurpose::SthSigning).map_err(|e| ApiError::new(503, "key_unavailable", e.to_string()))?;
        let sth = publish_sth(&self.ledger, key, self.clock.now_ms());
        self.sth.record(sth.clone()).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(sth)
    }

    pub fn latest_sth(&self) -> Result<SignedTreeHead, ApiError> {
        self.maybe_publish_sth()?;
        self.sth.latest().ok_or_else(|| ApiError::internal("no tree head published"))
    }

    pub fn sth_history(&self) -> Vec<SignedTreeHead> {
        self.sth.all()
    }

    /// Inclusion proof against `tree_size`, defaulting to the latest STH.
    pub fn inclusion_proof(&self, target: ProofTarget<'_>, tree_size: Option<u64>) -> Result<InclusionProof, ApiError> {
        let size = match tree_size {
            Some(s) => s,
            None => self.latest_sth()?.tree_size,
        };
        if size > self.ledger.size() {
            return Err(ApiError::new(400, "out_of_range", format!("tree_size {size} exceeds ledger size {}", self.ledger.size())));
        }
        match target {
            ProofTarget::Txn(txn) => {
                if !self.ledger.has_license(txn) {
                    return Err(ApiError::not_found(format!("no license for {txn}")));
                }
                Ok(self.ledger.inclusion_proof_for_txn(txn, size)?)
            }
            ProofTarget::Leaf(i) => Ok(self.ledger.inclusion_proof(i, size)?),
        }
    }

    pub fn consistency_proof(&self, old: u64, new: u64) -> Result<ConsistencyProof, ApiError> {
        Ok(self.ledger.consistency_proof(old, new)?)
    }

    pub fn entries(&self, txn_id: &str) -> Result<Vec<EntryBytes>, ApiError> {
        let list = self.ledger.entries_for(txn_id);
        if list.is_empty() {
            return Err(ApiError::not_found(format!("no entries for {txn_id}")));
        }
        Ok(list.iter().map(|e| EntryBytes { leaf_index: e.entry.leaf_index, entry_type: e.entry.entry_type, entry_hex: hex::encode(&e.bytes) }).collect())
    }

    pub fn entry_at(&self, leaf_index: u64) -> Result<EntryBytes, ApiError> {
        let e = self.ledger.entry(leaf_index).ok_or_else(|| ApiError::not_found(format!("no leaf {leaf_index}")))?;
        Ok(EntryBytes { leaf_index, entry_type: e.entry.entry_type, entry_hex: hex::encode(&e.bytes) })
    }

    pub fn spot_checks(&self) -> Vec<SpotCheckResult> {
        spot_check_results(&self.ledger)
    }

    pub fn publisher_health(&self) -> Vec<PublisherHealth> {
        publisher_health(&self.spot_checks(), self.config.escalation_threshold)
    }

    /// Runs every selected, not yet checked transaction's spot-check.
    pub fn run_spot_checks(&self) -> Result<Vec<SpotCheckResult>, ApiError> {
        let _guard = self.spot_lock.lock();
        let salt = epoch_salt(&self.config.spot_check_secret, self.clock.now());
        let mut out = Vec::new();
        for txn in due_spot_checks(&self.ledger, &self.spot_policy, &salt) {
            let (result, _) = run_spot_check(&self.ledger, &txn, self.fetcher.as_ref(), self.clock.now()).map_err(|e| ApiError::internal(e.to_string()))?;
            self.stats.spot_checks_run.fetch_add(1, Ordering::Relaxed);
            if result.verdict != aegon_core::spotcheck::Verdict::Verified {
                tracing::warn!(txn_id = %result.txn_id, publisher = %result.publisher_domain, verdict = ?result.verdict, "spot-check");
            }
            out.push(result);
        }
        if !out.is_empty() {
            self.after_append()?;
        }
        Ok(out)
    }

    /// Periodic work: STH cadence and due spot-checks.
    pub fn tick(&self) -> Result<(), ApiError> {
        self.maybe_publish_sth()?;
        if self.spot_policy.rate > 0.0 {
            self.run_spot_checks()?;
        }
        Ok(())
    }

    pub fn status(&self) -> Value {
        json!({
            "tree_size": self.ledger.size(),
            "sth_count": self.sth.all().len(),
            "licenses_issued": self.stats.licenses_issued.load(Ordering::Relaxed),
            "jwks_requests": self.stats.jwks_requests.load(Ordering::Relaxed),
            "spot_checks_run": self.stats.spot_checks_run.load(Ordering::Relaxed),
            "dedup_tracked": self.receipts.tracked(),
        })
    }
}

fn registration_error(e: RegistrationError) -> ApiError {
    match e {
        RegistrationError::Replay => ApiError::new(400, "challenge_replay", e.to_string()),
        RegistrationError::Chain(r) => ApiError::new(422, &r.to_string(), e.to_string()),
        RegistrationError::Revoked(_) => ApiError::new(409, "revoked_device", e.to_string()),
        RegistrationError::NotFound(_) => ApiError::not_found(e.to_string()),
        RegistrationError::Storage(m) => ApiError::internal(m),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), String> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| e.to_string())?;
    fs::rename(&tmp, path).map_err(|e| e.to_string())
}
