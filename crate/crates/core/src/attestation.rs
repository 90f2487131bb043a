//! Attested compliance receipts.
//!
//! Devices prove their key lives in secure hardware with a chain of JWS
//! "certificates" (leaf first) ending in a self-signed root that the broker
//! pins. The chain format is versioned (`aegon-attest-v1`); an X.509 adapter
//! can sit behind the same `verify_chain` contract.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use p256::ecdsa::{SigningKey, VerifyingKey};
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::canonical::canonical_encode_serialize;
use crate::clock::parse_rfc3339;
use crate::ids::{has_id_shape, RECEIPT_PREFIX};
use crate::jws::{self, b64, unb64, CompactJws, JoseHeader};
use crate::keys::Jwk;
use crate::ledger::{EntryType, Ledger, LedgerError, NewEntry};
use crate::token::{wire_enum, LicenseType};

pub const CHAIN_FORMAT: &str = "aegon-attest-v1";
pub const CERT_TYP: &str = "aegon-attest+jwt";
pub const RECEIPT_TYP: &str = "aegon-receipt+jws";
pub const RECEIPT_MAX_AGE: i64 = 7 * 86_400;
pub const DEDUP_RETENTION: i64 = 8 * 86_400;
pub const CHALLENGE_TTL: i64 = 600;

wire_enum!(SecurityLevel {
    StrongBox => "STRONGBOX",
    TrustedEnvironment => "TRUSTED_ENVIRONMENT",
    Software => "SOFTWARE",
});

wire_enum!(BootState {
    Verified => "VERIFIED",
    SelfSigned => "SELF_SIGNED",
    Unverified => "UNVERIFIED",
    Failed => "FAILED",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationExt {
    pub security_level: SecurityLevel,
    pub verified_boot_state: BootState,
    /// base64url challenge bytes.
    pub attestation_challenge: String,
    pub android_version: u32,
    pub security_patch_level: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertPayload {
    pub format: String,
    pub subject_id: String,
    pub issuer_id: String,
    pub subject_public_key: Jwk,
    pub not_before: i64,
    pub not_after: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attestation_ext: Option<AttestationExt>,
}

/// Signs a certificate payload with the issuer's key.
pub fn issue_cert(payload: &CertPayload, issuer_key: &SigningKey) -> String {
    let bytes = canonical_encode_serialize(payload).expect("cert encodes");
    jws::sign(&JoseHeader::es256(CERT_TYP, &payload.issuer_id), &bytes, issuer_key)
}

/// Certificates as compact JWS strings, leaf first, root last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttestationChain(pub Vec<String>);

/// A root keypair able to sign attestation chains (the test stand-in for a
/// hardware vendor's attestation CA).
#[derive(Debug, Clone)]
pub struct TrustAnchor {
    pub id: String,
    pub key: SigningKey,
    pub cert: String,
}

impl TrustAnchor {
    pub fn generate<R: RngCore + rand::CryptoRng>(rng: &mut R, id: &str, now: i64) -> Self {
        let key = SigningKey::random(rng);
        let payload = CertPayload {
            format: CHAIN_FORMAT.into(),
            subject_id: id.into(),
            issuer_id: id.into(),
            subject_public_key: Jwk::from_key(key.verifying_key()),
            not_before: now - 86_400,
            not_after: now + 20 * 365 * 86_400,
            attestation_ext: None,
        };
        let cert = issue_cert(&payload, &key);
        Self { id: id.into(), key, cert }
    }

    pub fn public_jwk(&self) -> Jwk {
        Jwk::from_key(self.key.verifying_key()).with_kid(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum ChainRejection {
    #[error("untrusted_root")]
    UntrustedRoot,
    #[error("broken_link")]
    BrokenLink,
    #[error("expired_cert")]
    ExpiredCert,
    #[error("challenge_mismatch")]
    ChallengeMismatch,
    #[error("software_level")]
    SoftwareLevel,
    #[error("unlocked_bootloader")]
    UnlockedBootloader,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedDevice {
    pub device_key: VerifyingKey,
    pub security_level: SecurityLevel,
    pub verified_boot_state: BootState,
    pub android_version: u32,
    pub security_patch_level: String,
}

/// Verifies a chain against pinned roots. Checks, in order: root pinned and
/// self-signed, every link signed by the next certificate's key with
/// matching issuer/subject ids, validity windows, leaf challenge, security
/// level, verified boot state.
pub fn verify_chain(chain: &AttestationChain, trust_roots: &[VerifyingKey], expected_challenge: &[u8], now: i64) -> Result<VerifiedDevice, ChainRejection> {
    if chain.0.len() < 2 {
        return Err(ChainRejection::BrokenLink);
    }
    let mut parsed = Vec::with_capacity(chain.0.len());
    for raw in &chain.0 {
        let jws = CompactJws::parse(raw).map_err(|_| ChainRejection::BrokenLink)?;
        let payload: CertPayload = serde_json::from_slice(&jws.payload).map_err(|_| ChainRejection::BrokenLink)?;
        if payload.format != CHAIN_FORMAT {
            return Err(ChainRejection::BrokenLink);
        }
        let key = payload.subject_public_key.to_key().map_err(|_| ChainRejection::BrokenLink)?;
        parsed.push((jws, payload, key));
    }

    let (root_jws, root, root_key) = parsed.last().unwrap();
    if !trust_roots.contains(root_key) {
        return Err(ChainRejection::UntrustedRoot);
    }
    if root.issuer_id != root.subject_id || !root_jws.verify(root_key) {
        return Err(ChainRejection::BrokenLink);
    }
    for pair in parsed.windows(2) {
        let (child_jws, child, _) = &pair[0];
        let (_, parent, parent_key) = &pair[1];
        if child.issuer_id != parent.subject_id || !child_jws.verify(parent_key) {
            return Err(ChainRejection::BrokenLink);
        }
    }
    if parsed.iter().any(|(_, p, _)| now < p.not_before || now > p.not_after) {
        return Err(ChainRejection::ExpiredCert);
    }

    let (_, leaf, leaf_key) = &parsed[0];
    let ext = leaf.attestation_ext.as_ref().ok_or(ChainRejection::BrokenLink)?;
    if unb64(&ext.attestation_challenge).as_deref() != Some(expected_challenge) {
        return Err(ChainRejection::ChallengeMismatch);
    }
    if ext.security_level == SecurityLevel::Software {
        return Err(ChainRejection::SoftwareLevel);
    }
    if ext.verified_boot_state != BootState::Verified {
        return Err(ChainRejection::UnlockedBootloader);
    }
    Ok(VerifiedDevice {
        device_key: *leaf_key,
        security_level: ext.security_level,
        verified_boot_state: ext.verified_boot_state,
        android_version: ext.android_version,
        security_patch_level: ext.security_patch_level.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LicenseConstraints {
    pub license_type: LicenseType,
    pub training_allowed: bool,
    pub storage_policy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceAttestation {
    pub key_id: String,
    pub strongbox_backed: bool,
    pub android_version: u32,
    pub security_patch_level: String,
}

/// Device-signed consumption record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceReceipt {
    pub receipt_id: String,
    pub txn_id: String,
    pub publisher_scope_id: String,
    pub timestamp: String,
    pub event_type: String,
    pub content_hash: String,
    pub license_constraints: LicenseConstraints,
    pub device_attestation: DeviceAttestation,
}

pub fn is_content_hash(s: &str) -> bool {
    s.strip_prefix("sha256:").is_some_and(|h| h.len() == 64 && h.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: String,
    pub public_key: Jwk,
    pub security_level: SecurityLevel,
    pub verified_boot_state: BootState,
    pub registered_at: i64,
    pub status: DeviceStatus,
}

/// Registration id for a device key.
pub fn device_id_for(key: &VerifyingKey) -> String {
    format!("dev_{}", Jwk::from_key(key).thumbprint())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistrationError {
    #[error("challenge unknown, expired or already used")]
    Replay,
    #[error("attestation rejected: {0}")]
    Chain(ChainRejection),
    #[error("device {0} was revoked; generate a new key")]
    Revoked(String),
    #[error("device {0} not found")]
    NotFound(String),
    #[error("registry storage: {0}")]
    Storage(String),
}

/// Single-use registration challenges.
#[derive(Debug, Default)]
pub struct ChallengeStore {
    pending: Mutex<HashMap<Vec<u8>, i64>>,
}

impl ChallengeStore {
    /// Issues 32 random bytes valid for ten minutes.
    pub fn issue<R: RngCore + ?Sized>(&self, rng: &mut R, now: i64) -> Vec<u8> {
        let mut c = vec![0u8; 32];
        rng.fill_bytes(&mut c);
        let mut pending = self.pending.lock();
        pending.retain(|_, exp| *exp >= now);
        pending.insert(c.clone(), now + CHALLENGE_TTL);
        c
    }

    pub fn consume(&self, challenge: &[u8], now: i64) -> Result<(), RegistrationError> {
        match self.pending.lock().remove(challenge) {
            Some(exp) if now <= exp => Ok(()),
            _ => Err(RegistrationError::Replay),
        }
    }
}

/// Registered devices, optionally persisted as a JSON file.
#[derive(Debug, Default)]
pub struct DeviceRegistry {
    devices: RwLock<HashMap<String, DeviceRecord>>,
    path: Option<PathBuf>,
}

impl DeviceRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, RegistrationError> {
        let devices = match fs::read(path) {
            Ok(raw) => {
                let list: Vec<DeviceRecord> = serde_json::from_slice(&raw).map_err(|e| RegistrationError::Storage(e.to_string()))?;
                list.into_iter().map(|d| (d.device_id.clone(), d)).collect()
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => HashMap::new(),
            Err(e) => return Err(RegistrationError::Storage(e.to_string())),
        };
        Ok(Self { devices: RwLock::new(devices), path: Some(path.to_path_buf()) })
    }

    fn persist(&self, devices: &HashMap<String, DeviceRecord>) -> Result<(), RegistrationError> {
        let Some(path) = &self.path else { return Ok(()) };
        let mut list: Vec<&DeviceRecord> = devices.values().collect();
        list.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&list).unwrap()).map_err(|e| RegistrationError::Storage(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| RegistrationError::Storage(e.to_string()))
    }

    pub fn get(&self, device_id: &str) -> Option<DeviceRecord> {
        self.devices.read().get(device_id).cloned()
    }

    /// Consumes `challenge`, verifies the chain against it and records the
    /// device.
    pub fn register(
        &self,
        challenges: &ChallengeStore,
        chain: &AttestationChain,
        challenge: &[u8],
        trust_roots: &[VerifyingKey],
        now: i64,
    ) -> Result<DeviceRecord, RegistrationError> {
        challenges.consume(challenge, now)?;
        let verified = verify_chain(chain, trust_roots, challenge, now).map_err(RegistrationError::Chain)?;
        let device_id = device_id_for(&verified.device_key);
        let mut devices = self.devices.write();
        if let Some(existing) = devices.get(&device_id) {
            return match existing.status {
                DeviceStatus::Active => Ok(existing.clone()),
                DeviceStatus::Revoked => Err(RegistrationError::Revoked(device_id)),
            };
        }
        let record = DeviceRecord {
            device_id: device_id.clone(),
            public_key: Jwk::from_key(&verified.device_key),
            security_level: verified.security_level,
            verified_boot_state: verified.verified_boot_state,
            registered_at: now,
            status: DeviceStatus::Active,
        };
        devices.insert(device_id, record.clone());
        self.persist(&devices)?;
        Ok(record)
    }

    /// Marks a device revoked. Idempotent; receipts accepted earlier stay in
    /// the ledger.
    pub fn revoke(&self, device_id: &str) -> Result<DeviceRecord, RegistrationError> {
        let mut devices = self.devices.write();
        let rec = devices.get_mut(device_id).ok_or_else(|| RegistrationError::NotFound(device_id.to_string()))?;
        rec.status = DeviceStatus::Revoked;
        let out = rec.clone();
        self.persist(&devices)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum ReceiptRejection {
    #[error("malformed")]
    Malformed,
    #[error("unknown_device")]
    UnknownDevice,
    #[error("revoked_device")]
    RevokedDevice,
    #[error("bad_signature")]
    BadSignature,
    #[error("unknown_txn")]
    UnknownTxn,
    #[error("no_publisher_hash")]
    NoPublisherHash,
    #[error("hash_mismatch")]
    HashMismatch,
    #[error("stale_receipt")]
    StaleReceipt,
    #[error("duplicate_receipt")]
    DuplicateReceipt,
}

impl ReceiptRejection {
    pub fn code(self) -> &'static str {
        match self {
            Self::Malformed => "malformed",
            Self::UnknownDevice => "unknown_device",
            Self::RevokedDevice => "revoked_device",
            Self::BadSignature => "bad_signature",
            Self::UnknownTxn => "unknown_txn",
            Self::NoPublisherHash => "no_publisher_hash",
            Self::HashMismatch => "hash_mismatch",
            Self::StaleReceipt => "stale_receipt",
            Self::DuplicateReceipt => "duplicate_receipt",
        }
    }

    /// Whether resubmitting later can succeed (the publisher report may
    /// still be in flight).
    pub fn is_retryable(self) -> bool {
        self == Self::NoPublisherHash
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedReceipt {
    pub receipt_id: String,
    pub leaf_index: u64,
}

#[derive(Debug, Error)]
pub enum ReceiptError {
    #[error(transparent)]
    Rejected(#[from] ReceiptRejection),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Broker-side receipt checks with the dedup store.
#[derive(Debug, Default)]
pub struct ReceiptVerifier {
    seen: Mutex<HashMap<String, i64>>,
}

impl ReceiptVerifier {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds the dedup store from `receipt_accepted` ledger entries.
    pub fn rebuild(ledger: &Ledger) -> Self {
        let seen = ledger
            .entries_of_type(EntryType::ReceiptAccepted)
            .iter()
            .filter_map(|e| Some((e.entry.payload["receipt_id"].as_str()?.to_string(), e.entry.server_timestamp)))
            .collect();
        Self { seen: Mutex::new(seen) }
    }

    pub fn tracked(&self) -> usize {
        self.seen.lock().len()
    }

    /// Checks a receipt and, on success, appends a `receipt_accepted` entry.
    /// The first failing check is returned; the order is device, signature,
    /// payload shape, transaction, publisher hash, age, duplicate.
    pub fn verify_receipt(&self, receipt_jws: &str, ledger: &Ledger, registry: &DeviceRegistry, now: i64) -> Result<AcceptedReceipt, ReceiptError> {
        let jws = CompactJws::parse(receipt_jws).map_err(|_| ReceiptRejection::Malformed)?;
        let device_id = jws.header.kid.as_deref().ok_or(ReceiptRejection::UnknownDevice)?;
        let device = registry.get(device_id).ok_or(ReceiptRejection::UnknownDevice)?;
        if device.status == DeviceStatus::Revoked {
            return Err(ReceiptRejection::RevokedDevice.into());
        }
        let key = device.public_key.to_key().map_err(|_| ReceiptRejection::UnknownDevice)?;
        if !jws.verify(&key) {
            return Err(ReceiptRejection::BadSignature.into());
        }
        let receipt: ComplianceReceipt = serde_json::from_slice(&jws.payload).map_err(|_| ReceiptRejection::Malformed)?;
        let ts = parse_rfc3339(&receipt.timestamp).ok_or(ReceiptRejection::Malformed)?;
        if !has_id_shape(&receipt.receipt_id, RECEIPT_PREFIX)
            || receipt.event_type != "content_consumed"
            || !is_content_hash(&receipt.content_hash)
            || !receipt.publisher_scope_id.starts_with("ps_")
            || receipt.device_attestation.key_id != device.device_id
        {
            return Err(ReceiptRejection::Malformed.into());
        }
        if !ledger.has_license(&receipt.txn_id) {
            return Err(ReceiptRejection::UnknownTxn.into());
        }
        let publisher_hash = ledger
            .entries_for(&receipt.txn_id)
            .iter()
            .find(|e| e.entry.entry_type == EntryType::ContentHashReported)
            .and_then(|e| e.entry.payload["content_sha256"].as_str().map(str::to_string))
            .ok_or(ReceiptRejection::NoPublisherHash)?;
        if receipt.content_hash.strip_prefix("sha256:") != Some(publisher_hash.as_str()) {
            return Err(ReceiptRejection::HashMismatch.into());
        }
        if now - ts > RECEIPT_MAX_AGE {
            return Err(ReceiptRejection::StaleReceipt.into());
        }

        let mut seen = self.seen.lock();
        if seen.contains_key(&receipt.receipt_id) {
            return Err(ReceiptRejection::DuplicateReceipt.into());
        }
        let leaf_index = ledger.append(NewEntry {
            txn_id: receipt.txn_id.clone(),
            entry_type: EntryType::ReceiptAccepted,
            payload: json!({
                "receipt_id": receipt.receipt_id,
                "device_id": device.device_id,
                "receipt_jws": receipt_jws,
                "content_hash": receipt.content_hash,
                "receipt_timestamp": receipt.timestamp,
            }),
            server_timestamp: now,
        })?;
        seen.insert(receipt.receipt_id.clone(), now);
        if seen.len().is_multiple_of(1024) {
            seen.retain(|_, at| now - *at <= DEDUP_RETENTION);
        }
        Ok(AcceptedReceipt { receipt_id: receipt.receipt_id, leaf_index })
    }
}

/// Challenge bytes as carried in JSON.
pub fn encode_challenge(c: &[u8]) -> String {
    b64(c)
}

pub fn decode_challenge(s: &str) -> Option<Vec<u8>> {
    unb64(s)
}

/// Per-item result of a batch receipt submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReceiptItemResult {
    Accepted { receipt_id: String, leaf_index: u64 },
    Rejected { reason: ReceiptRejection },
}
