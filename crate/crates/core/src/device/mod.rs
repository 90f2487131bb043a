//! Simulated Android client: a hardware-backed key with an attestation
//! chain, receipt construction and an offline upload queue.

pub mod queue;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use hmac::{Hmac, Mac};
use p256::ecdsa::SigningKey;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

use crate::attestation::{
    device_id_for, issue_cert, AttestationChain, AttestationExt, BootState, CertPayload, ComplianceReceipt, DeviceAttestation, LicenseConstraints,
    ReceiptItemResult, SecurityLevel, TrustAnchor, CHAIN_FORMAT, RECEIPT_TYP,
};
use crate::backoff::Backoff;
use crate::clock::{to_rfc3339, Clock};
use crate::edge::TransportError;
use crate::ids::new_receipt_id;
use crate::jws::{self, b64, JoseHeader};
use crate::keys::Jwk;
use crate::provenance::fingerprint;
use crate::token::LicenseType;

pub use queue::{OfflineQueue, QueueError, QueuedReceipt};

pub const MAX_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub security_level: SecurityLevel,
    pub boot_state: BootState,
    pub android_version: u32,
    pub security_patch_level: String,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self { security_level: SecurityLevel::StrongBox, boot_state: BootState::Verified, android_version: 14, security_patch_level: "2026-03-01".into() }
    }
}

/// What the app knows when content is consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceiptRequest {
    pub txn_id: String,
    pub publisher_domain: String,
    pub content: Vec<u8>,
    pub license_type: LicenseType,
    pub training_allowed: bool,
    pub storage_policy: String,
}

pub trait ReceiptSubmitter {
    /// Posts a batch; on success returns one result per submitted receipt.
    fn submit(&self, batch: &[String]) -> Result<Vec<ReceiptItemResult>, TransportError>;
}

pub trait Connectivity {
    fn is_online(&self, now_ms: i64) -> bool;
}

impl<F: Fn(i64) -> bool> Connectivity for F {
    fn is_online(&self, now_ms: i64) -> bool {
        self(now_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlushOptions {
    pub backoff: Backoff,
    /// Consecutive attempts without progress before giving up this flush.
    pub max_attempts: u32,
}

impl Default for FlushOptions {
    fn default() -> Self {
        Self { backoff: Backoff::default(), max_attempts: 20 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlushReport {
    pub batch_sizes: Vec<usize>,
    pub base_delays: Vec<Duration>,
    pub delays: Vec<Duration>,
    pub accepted: Vec<String>,
    pub duplicates: Vec<String>,
    pub rejected: Vec<(String, String)>,
    pub failed_attempts: u32,
    pub remaining: usize,
}

pub struct SimDevice {
    signing: SigningKey,
    device_id: String,
    chain: AttestationChain,
    profile: DeviceProfile,
    scope_secret: [u8; 32],
    queue: OfflineQueue,
    rng: ChaCha20Rng,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for SimDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimDevice").field("device_id", &self.device_id).field("profile", &self.profile).field("queue", &self.queue).finish()
    }
}

impl SimDevice {
    /// Generates a device key and a leaf/intermediate/root chain binding it
    /// to `challenge`.
    pub fn provision(challenge: &[u8], profile: DeviceProfile, root: &TrustAnchor, clock: Arc<dyn Clock>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let now = clock.now();
        let signing = SigningKey::random(&mut rng);
        let intermediate = SigningKey::random(&mut rng);
        let device_id = device_id_for(signing.verifying_key());
        let inter_id = format!("{}-intermediate", root.id);

        let inter_cert = issue_cert(
            &CertPayload {
                format: CHAIN_FORMAT.into(),
                subject_id: inter_id.clone(),
                issuer_id: root.id.clone(),
                subject_public_key: Jwk::from_key(intermediate.verifying_key()),
                not_before: now - 86_400,
                not_after: now + 10 * 365 * 86_400,
                attestation_ext: None,
            },
            &root.key,
        );
        let leaf_cert = issue_cert(
            &CertPayload {
                format: CHAIN_FORMAT.into(),
                subject_id: device_id.clone(),
                issuer_id: inter_id,
                subject_public_key: Jwk::from_key(signing.verifying_key()),
                not_before: now - 60,
                not_after: now + 2 * 365 * 86_400,
                attestation_ext: Some(AttestationExt {
                    security_level: profile.security_level,
                    verified_boot_state: profile.boot_state,
                    attestation_challenge: b64(challenge),
                    android_version: profile.android_version,
                    security_patch_level: profile.security_patch_level.clone(),
                }),
            },
            &intermediate,
        );
        let mut scope_secret = [0u8; 32];
        rng.fill_bytes(&mut scope_secret);
        Self {
            signing,
            device_id,
            chain: AttestationChain(vec![leaf_cert, inter_cert, root.cert.clone()]),
            profile,
            scope_secret,
            queue: OfflineQueue::in_memory(),
            rng,
            clock,
        }
    }

    /// Switches to a persistent encrypted queue at `path`, replaying any
    /// receipts already journaled there.
    pub fn attach_queue(&mut self, path: &Path, key: &[u8; 32]) -> Result<(), QueueError> {
        self.queue = OfflineQueue::open(path, key)?;
        Ok(())
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn chain(&self) -> &AttestationChain {
        &self.chain
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn queue(&self) -> &OfflineQueue {
        &self.queue
    }

    /// Per-device pseudonym for a publisher: unlinkable across devices.
    pub fn publisher_scope_id(&self, publisher_domain: &str) -> String {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.scope_secret).expect("hmac key");
        mac.update(publisher_domain.to_ascii_lowercase().as_bytes());
        format!("ps_{}", &hex::encode(mac.finalize().into_bytes())[..24])
    }

    pub fn build_receipt(&mut self, req: &ReceiptRequest) -> ComplianceReceipt {
        ComplianceReceipt {
            receipt_id: new_receipt_id(&mut self.rng),
            txn_id: req.txn_id.clone(),
            publisher_scope_id: self.publisher_scope_id(&req.publisher_domain),
            timestamp: to_rfc3339(self.clock.now()),
            event_type: "content_consumed".into(),
            content_hash: format!("sha256:{}", fingerprint(&req.content)),
            license_constraints: LicenseConstraints {
                license_type: req.license_type,
                training_allowed: req.training_allowed,
                storage_policy: req.storage_policy.clone(),
            },
            device_attestation: DeviceAttestation {
                key_id: self.device_id.clone(),
                strongbox_backed: self.profile.security_level == SecurityLevel::StrongBox,
                android_version: self.profile.android_version,
                security_patch_level: self.profile.security_patch_level.clone(),
            },
        }
    }

    /// Signs an arbitrary receipt body with the device key.
    pub fn sign_receipt(&self, receipt: &ComplianceReceipt) -> String {
        let bytes = crate::canonical::canonical_encode_serialize(receipt).expect("receipt encodes");
        jws::sign(&JoseHeader::es256(RECEIPT_TYP, &self.device_id), &bytes, &self.signing)
    }

    pub fn make_receipt(&mut self, req: &ReceiptRequest) -> (ComplianceReceipt, String) {
        let receipt = self.build_receipt(req);
        let jws = self.sign_receipt(&receipt);
        (receipt, jws)
    }

    /// Builds, signs and durably queues a receipt.
    pub fn record_consumption(&mut self, req: &ReceiptRequest) -> Result<ComplianceReceipt, QueueError> {
        let (receipt, jws) = self.make_receipt(req);
        self.queue.enqueue(&receipt.receipt_id, &jws)?;
        Ok(receipt)
    }

    pub fn enqueue_signed(&mut self, receipt_id: &str, jws: &str) -> Result<(), QueueError> {
        self.queue.enqueue(receipt_id, jws)
    }

    /// Uploads queued receipts oldest first in batches of at most 100.
    /// Offline periods and transport failures back off exponentially with
    /// jitter; `duplicate_receipt` counts as an acknowledgement and
    /// retryable rejections stay queued.
    pub fn flush(&mut self, submitter: &dyn ReceiptSubmitter, connectivity: &dyn Connectivity, opts: &FlushOptions) -> Result<FlushReport, QueueError> {
        let mut report = FlushReport::default();
        let mut attempt = 0u32;
        while !self.queue.is_empty() {
            let progressed = if connectivity.is_online(self.clock.now_ms()) {
                let batch = self.queue.front(MAX_BATCH);
                let jws: Vec<String> = batch.iter().map(|q| q.jws.clone()).collect();
                report.batch_sizes.push(batch.len());
                match submitter.submit(&jws) {
                    Ok(results) if results.len() == batch.len() => {
                        let mut done = Vec::new();
                        for (q, r) in batch.iter().zip(results) {
                            match r {
                                ReceiptItemResult::Accepted { .. } => {
                                    report.accepted.push(q.receipt_id.clone());
                                    done.push(q.receipt_id.clone());
                                }
                                ReceiptItemResult::Rejected { reason } if reason.is_retryable() => {}
                                ReceiptItemResult::Rejected { reason } => {
                                    if reason == crate::attestation::ReceiptRejection::DuplicateReceipt {
                                        report.duplicates.push(q.receipt_id.clone());
                                    } else {
                                        report.rejected.push((q.receipt_id.clone(), reason.code().to_string()));
                                    }
                                    done.push(q.receipt_id.clone());
                                }
                            }
                        }
                        self.queue.ack(&done)?;
                        !done.is_empty()
                    }
                    _ => false,
                }
            } else {
                false
            };
            if progressed {
                attempt = 0;
                continue;
            }
            report.failed_attempts += 1;
            attempt += 1;
            if attempt >= opts.max_attempts {
                break;
            }
            report.base_delays.push(opts.backoff.base_delay(attempt));
            let d = opts.backoff.delay(attempt, &mut self.rng);
            report.delays.push(d);
            self.clock.sleep(d);
        }
        report.remaining = self.queue.len();
        Ok(report)
    }
}
