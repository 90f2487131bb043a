use std::sync::Arc;

use aegon_core::attestation::*;
use aegon_core::clock::{to_rfc3339, Clock, ManualClock};
use aegon_core::device::{DeviceProfile, ReceiptRequest, SimDevice};
use aegon_core::keys::BrokerKeySet;
use aegon_core::provenance::fingerprint;
use aegon_core::token::{issue_token, LicenseRequest, LicenseType, Scope, TokenPolicy};
use aegon_core::{EntryType, Ledger, NewEntry};
use p256::ecdsa::VerifyingKey;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

const T0: i64 = 1_790_000_000;
const BODY: &[u8] = b"<article>licensed</article>";

fn anchor(seed: u64) -> TrustAnchor {
    TrustAnchor::generate(&mut ChaCha20Rng::seed_from_u64(seed), &format!("root-{seed}"), T0 - 1000)
}

fn roots(a: &TrustAnchor) -> Vec<VerifyingKey> {
    vec![*a.key.verifying_key()]
}

fn provision(profile: DeviceProfile, root: &TrustAnchor, clock: Arc<ManualClock>, seed: u64) -> SimDevice {
    SimDevice::provision(b"the-challenge", profile, root, clock, seed)
}

#[test]
fn chain_rejections_each_have_their_reason() {
    let root = anchor(1);
    let clock = Arc::new(ManualClock::new(T0));
    let good = provision(DeviceProfile::default(), &root, clock.clone(), 2);
    assert!(verify_chain(good.chain(), &roots(&root), b"the-challenge", T0).is_ok());

    let other = anchor(3);
    assert_eq!(verify_chain(good.chain(), &roots(&other), b"the-challenge", T0), Err(ChainRejection::UntrustedRoot));

    let sibling = provision(DeviceProfile::default(), &root, clock.clone(), 4);
    let mut spliced = good.chain().clone();
    spliced.0[1] = sibling.chain().0[1].clone();
    assert_eq!(verify_chain(&spliced, &roots(&root), b"the-challenge", T0), Err(ChainRejection::BrokenLink));
    let short = AttestationChain(vec![good.chain().0[0].clone()]);
    assert_eq!(verify_chain(&short, &roots(&root), b"the-challenge", T0), Err(ChainRejection::BrokenLink));
    let garbage = AttestationChain(vec!["x.y.z".into(), root.cert.clone()]);
    assert_eq!(verify_chain(&garbage, &roots(&root), b"the-challenge", T0), Err(ChainRejection::BrokenLink));

    let late = T0 + 3 * 365 * 86_400;
    assert_eq!(verify_chain(good.chain(), &roots(&root), b"the-challenge", late), Err(ChainRejection::ExpiredCert));
    assert_eq!(verify_chain(good.chain(), &roots(&root), b"another", T0), Err(ChainRejection::ChallengeMismatch));

    let soft = provision(DeviceProfile { security_level: SecurityLevel::Software, ..Default::default() }, &root, clock.clone(), 5);
    assert_eq!(verify_chain(soft.chain(), &roots(&root), b"the-challenge", T0), Err(ChainRejection::SoftwareLevel));

    for boot in [BootState::SelfSigned, BootState::Unverified, BootState::Failed] {
        let d = provision(DeviceProfile { boot_state: boot, ..Default::default() }, &root, clock.clone(), 6);
        assert_eq!(verify_chain(d.chain(), &roots(&root), b"the-challenge", T0), Err(ChainRejection::UnlockedBootloader));
    }

    let tee = provision(DeviceProfile { security_level: SecurityLevel::TrustedEnvironment, ..Default::default() }, &root, clock, 7);
    assert_eq!(verify_chain(tee.chain(), &roots(&root), b"the-challenge", T0).unwrap().security_level, SecurityLevel::TrustedEnvironment);
}

#[test]
fn challenges_are_single_use_and_expire() {
    let store = ChallengeStore::default();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let c = store.issue(&mut rng, T0);
    assert_eq!(c.len(), 32);
    assert!(store.consume(&c, T0 + 10).is_ok());
    assert_eq!(store.consume(&c, T0 + 11), Err(RegistrationError::Replay));
    let c2 = store.issue(&mut rng, T0);
    assert_eq!(store.consume(&c2, T0 + CHALLENGE_TTL + 1), Err(RegistrationError::Replay));
}

struct World {
    ledger: Ledger,
    registry: DeviceRegistry,
    verifier: ReceiptVerifier,
    device: SimDevice,
    clock: Arc<ManualClock>,
    txn: String,
    root: TrustAnchor,
}

fn world() -> World {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let keys = BrokerKeySet::generate(&mut rng);
    let ledger = Ledger::in_memory();
    let req = LicenseRequest {
        platform_id: "reader-app".into(),
        publisher_domain: "news.example".into(),
        resource_url: "https://news.example/a/1".into(),
        scope: Scope::FullArticleHtml,
        license_type: LicenseType::Session,
        training_allowed: false,
        attribution_required: true,
        provenance_required: false,
    };
    let txn = issue_token(&req, &keys, &ledger, &TokenPolicy::default(), &mut rng, T0).unwrap().txn_id;
    ledger
        .append(NewEntry {
            txn_id: txn.clone(),
            entry_type: EntryType::ContentHashReported,
            payload: json!({"content_sha256": fingerprint(BODY)}),
            server_timestamp: T0,
        })
        .unwrap();
    let root = anchor(9);
    let clock = Arc::new(ManualClock::new(T0));
    let challenges = ChallengeStore::default();
    let c = challenges.issue(&mut rng, T0);
    let device = SimDevice::provision(&c, DeviceProfile::default(), &root, clock.clone(), 77);
    let registry = DeviceRegistry::in_memory();
    registry.register(&challenges, device.chain(), &c, &roots(&root), T0).unwrap();
    World { ledger, registry, verifier: ReceiptVerifier::new(), device, clock, txn, root }
}

fn request(w: &World, content: &[u8]) -> ReceiptRequest {
    ReceiptRequest {
        txn_id: w.txn.clone(),
        publisher_domain: "news.example".into(),
        content: content.to_vec(),
        license_type: LicenseType::Session,
        training_allowed: false,
        storage_policy: "ephemeral".into(),
    }
}

fn reject(w: &World, jws: &str, now: i64) -> ReceiptRejection {
    match w.verifier.verify_receipt(jws, &w.ledger, &w.registry, now) {
        Err(ReceiptError::Rejected(r)) => r,
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn receipt_accepted_then_duplicate() {
    let mut w = world();
    let (_, jws) = w.device.make_receipt(&request(&w, BODY));
    let ok = w.verifier.verify_receipt(&jws, &w.ledger, &w.registry, T0 + 5).unwrap();
    let entry = w.ledger.entry(ok.leaf_index).unwrap();
    assert_eq!(entry.entry.entry_type, EntryType::ReceiptAccepted);
    assert_eq!(reject(&w, &jws, T0 + 6), ReceiptRejection::DuplicateReceipt);

    let rebuilt = ReceiptVerifier::rebuild(&w.ledger);
    assert_eq!(rebuilt.tracked(), 1);
    assert!(matches!(rebuilt.verify_receipt(&jws, &w.ledger, &w.registry, T0 + 7), Err(ReceiptError::Rejected(ReceiptRejection::DuplicateReceipt))));
}

#[test]
fn receipt_rejection_reasons() {
    let mut w = world();
    let size_before = w.ledger.size();

    let (_, mismatched) = w.device.make_receipt(&request(&w, b"other bytes"));
    assert_eq!(reject(&w, &mismatched, T0), ReceiptRejection::HashMismatch);

    let mut unknown = request(&w, BODY);
    unknown.txn_id = "txn_aaaaaaaaaaaaaaaaaaaaaaaaaa".into();
    let (_, jws) = w.device.make_receipt(&unknown);
    assert_eq!(reject(&w, &jws, T0), ReceiptRejection::UnknownTxn);

    let (_, fresh) = w.device.make_receipt(&request(&w, BODY));
    assert_eq!(reject(&w, &fresh, T0 + 8 * 86_400), ReceiptRejection::StaleReceipt);

    let mut parts: Vec<String> = fresh.split('.').map(str::to_string).collect();
    let mut sig = aegon_core::jws::unb64(&parts[2]).unwrap();
    sig[10] ^= 1;
    parts[2] = aegon_core::jws::b64(&sig);
    assert_eq!(reject(&w, &parts.join("."), T0), ReceiptRejection::BadSignature);

    let stranger = provision(DeviceProfile::default(), &w.root, w.clock.clone(), 1234);
    let (_, jws) = {
        let mut s = stranger;
        s.make_receipt(&request(&w, BODY))
    };
    assert_eq!(reject(&w, &jws, T0), ReceiptRejection::UnknownDevice);

    assert_eq!(reject(&w, "not-a-jws", T0), ReceiptRejection::Malformed);
    assert_eq!(w.ledger.size(), size_before);
}

#[test]
fn receipt_without_publisher_hash_is_retryable() {
    let mut w = world();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let keys = BrokerKeySet::generate(&mut rng);
    let req = LicenseRequest {
        platform_id: "reader-app".into(),
        publisher_domain: "news.example".into(),
        resource_url: "https://news.example/a/2".into(),
        scope: Scope::FullArticleHtml,
        license_type: LicenseType::Session,
        training_allowed: false,
        attribution_required: false,
        provenance_required: false,
    };
    let txn = issue_token(&req, &keys, &w.ledger, &TokenPolicy::default(), &mut rng, T0).unwrap().txn_id;
    let mut r = request(&w, BODY);
    r.txn_id = txn;
    let (_, jws) = w.device.make_receipt(&r);
    let reason = reject(&w, &jws, T0);
    assert_eq!(reason, ReceiptRejection::NoPublisherHash);
    assert!(reason.is_retryable());
}

#[test]
fn revocation_blocks_new_receipts_and_is_idempotent() {
    let mut w = world();
    let (_, before) = w.device.make_receipt(&request(&w, BODY));
    let accepted = w.verifier.verify_receipt(&before, &w.ledger, &w.registry, T0).unwrap();
    let id = w.device.device_id().to_string();
    assert_eq!(w.registry.revoke(&id).unwrap().status, DeviceStatus::Revoked);
    assert_eq!(w.registry.revoke(&id).unwrap().status, DeviceStatus::Revoked);
    let (_, after) = w.device.make_receipt(&request(&w, BODY));
    assert_eq!(reject(&w, &after, T0), ReceiptRejection::RevokedDevice);
    assert!(w.ledger.entry(accepted.leaf_index).is_some());
    assert!(matches!(w.registry.revoke("dev_nope"), Err(RegistrationError::NotFound(_))));
}

#[test]
fn registration_rejects_replayed_challenge_and_bad_chain() {
    let root = anchor(11);
    let clock = Arc::new(ManualClock::new(T0));
    let challenges = ChallengeStore::default();
    let registry = DeviceRegistry::in_memory();
    let mut rng = ChaCha20Rng::seed_from_u64(8);

    let c = challenges.issue(&mut rng, T0);
    let d = SimDevice::provision(&c, DeviceProfile::default(), &root, clock.clone(), 1);
    registry.register(&challenges, d.chain(), &c, &roots(&root), T0).unwrap();
    assert_eq!(registry.register(&challenges, d.chain(), &c, &roots(&root), T0), Err(RegistrationError::Replay));

    let c = challenges.issue(&mut rng, T0);
    let unlocked = SimDevice::provision(&c, DeviceProfile { boot_state: BootState::Unverified, ..Default::default() }, &root, clock, 2);
    assert_eq!(registry.register(&challenges, unlocked.chain(), &c, &roots(&root), T0), Err(RegistrationError::Chain(ChainRejection::UnlockedBootloader)));
    assert!(registry.get(unlocked.device_id()).is_none());
}

#[test]
fn registry_persists_across_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("devices.json");
    let root = anchor(12);
    let clock = Arc::new(ManualClock::new(T0));
    let challenges = ChallengeStore::default();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let c = challenges.issue(&mut rng, T0);
    let d = SimDevice::provision(&c, DeviceProfile::default(), &root, clock, 3);
    {
        let reg = DeviceRegistry::open(&path).unwrap();
        reg.register(&challenges, d.chain(), &c, &roots(&root), T0).unwrap();
        reg.revoke(d.device_id()).unwrap();
    }
    let reg = DeviceRegistry::open(&path).unwrap();
    assert_eq!(reg.get(d.device_id()).unwrap().status, DeviceStatus::Revoked);
}

#[test]
fn receipt_shape() {
    let mut w = world();
    w.clock.set(1_781_517_600);
    let (r, jws) = w.device.make_receipt(&request(&w, BODY));
    assert_eq!(r.timestamp, to_rfc3339(w.clock.now()));
    assert!(is_content_hash(&r.content_hash));
    assert!(r.receipt_id.starts_with("rcpt_"));
    assert!(r.publisher_scope_id.starts_with("ps_"));
    assert!(jws.len() < 4096, "receipt is {} bytes", jws.len());
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["content_hash", "device_attestation", "event_type", "license_constraints", "publisher_scope_id", "receipt_id", "timestamp", "txn_id"]);
}
