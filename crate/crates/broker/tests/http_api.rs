use std::sync::Arc;

use aegon_broker::client::{BrokerClient, ClientError};
use aegon_broker::fetch::NoFetch;
use aegon_broker::http::{router, BackgroundServer};
use aegon_broker::{Broker, BrokerConfig};
use aegon_core::clock::{Clock, ManualClock};
use aegon_core::edge::{ContentHashReport, HashAck};
use aegon_core::keys::Jwk;
use aegon_core::merkle::{empty_root, leaf_hash};
use aegon_core::provenance::{fingerprint, EventBody, SignedEvent};
use aegon_core::sth::{verify_consistency, verify_inclusion};
use aegon_core::token::{LicenseRequest, LicenseType, Scope};
use p256::ecdsa::SigningKey;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const T0: i64 = 1_790_000_000;

struct Running {
    broker: Arc<Broker>,
    clock: Arc<ManualClock>,
    client: BrokerClient,
    _server: BackgroundServer,
}

fn start(config: BrokerConfig) -> Running {
    let clock = Arc::new(ManualClock::new(T0));
    let broker = Arc::new(Broker::open(config, clock.clone(), Arc::new(NoFetch)).unwrap());
    let server = BackgroundServer::start(router(broker.clone()), None).unwrap();
    let client = BrokerClient::new(&server.url());
    Running { broker, clock, client, _server: server }
}

fn seeded() -> BrokerConfig {
    BrokerConfig { seed: Some(1), ..BrokerConfig::default() }
}

fn request(path: &str) -> LicenseRequest {
    LicenseRequest {
        platform_id: "answers-ai".into(),
        publisher_domain: "publisher.com".into(),
        resource_url: format!("https://publisher.com{path}"),
        scope: Scope::FullArticleHtml,
        license_type: LicenseType::Session,
        training_allowed: false,
        attribution_required: true,
        provenance_required: true,
    }
}

#[test]
fn fresh_broker_serves_empty_sth() {
    let r = start(seeded());
    let sth = r.client.sth().unwrap();
    assert_eq!(sth.tree_size, 0);
    assert_eq!(sth.root_hash, empty_root());
    sth.verify_signature(&r.client.jwks().unwrap()).unwrap();
}

#[test]
fn unknown_txn_proof_is_not_found() {
    let r = start(seeded());
    match r.client.proof_for_txn("txn_doesnotexist", 0) {
        Err(ClientError::Api { status, error_code, .. }) => assert_eq!((status, error_code.as_str()), (404, "not_found")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn license_flow_over_loopback() {
    let r = start(seeded());
    let platform = SigningKey::random(&mut ChaCha20Rng::seed_from_u64(2));
    r.client.register_platform("answers-ai", &Jwk::from_key(platform.verifying_key())).unwrap();

    let issued = r.client.issue_license(&request("/articles/1")).unwrap();
    let body = b"<article>hello</article>";
    let report =
        ContentHashReport { txn_id: issued.txn_id.clone(), content_sha256: fingerprint(body), publisher_domain: "publisher.com".into(), observed_at: T0 };
    let first = r.client.content_hash(&report).unwrap();
    assert!(matches!(first, HashAck::Recorded { .. }));
    assert!(matches!(r.client.content_hash(&report).unwrap(), HashAck::Duplicate { .. }));
    let mut other = report.clone();
    other.content_sha256 = fingerprint(b"different");
    assert_eq!(r.client.content_hash(&other).unwrap_err().code(), Some("hash_conflict"));
    let mut missing = report.clone();
    missing.txn_id = "txn_neverissued".into();
    assert_eq!(r.client.content_hash(&missing).unwrap(), HashAck::NotFound);

    let event = SignedEvent::sign(
        EventBody {
            txn_id: issued.txn_id.clone(),
            event_type: "content_fetched".into(),
            content_fingerprint: fingerprint(body),
            stage_detail: None,
            client_timestamp: T0,
        },
        &platform,
        "answers-ai",
    );
    let ack = r.client.provenance(&event).unwrap();
    assert_eq!(ack.server_receipt_timestamp, T0);

    r.clock.advance_secs(61);
    let sth = r.client.sth().unwrap();
    assert_eq!(sth.tree_size, 3);
    let jwks = r.client.jwks().unwrap();
    let entries = r.client.entries(&issued.txn_id).unwrap();
    assert_eq!(entries.len(), 3);
    for e in &entries {
        let proof = r.client.get(&format!("/v1/proof?leaf_index={}&tree_size={}", e.leaf_index, sth.tree_size)).unwrap();
        assert!(verify_inclusion(&proof, &leaf_hash(&hex::decode(&e.entry_hex).unwrap()), &sth, &jwks));
    }
    let history = r.broker.sth_history();
    let c = r.client.consistency(history[0].tree_size, sth.tree_size).unwrap();
    assert!(verify_consistency(&c, &history[0], &sth, &jwks));
}

#[test]
fn errors_are_json_with_codes() {
    let r = start(seeded());
    let mut bad = request("/a");
    bad.publisher_domain = "elsewhere.com".into();
    assert_eq!(r.client.issue_license(&bad).unwrap_err().code(), Some("validation"));
    let err: Result<serde_json::Value, _> = r.client.post("/v1/licenses", &serde_json::json!({"nope": 1}));
    assert_eq!(err.unwrap_err().code(), Some("malformed_request"));
    let big = vec!["x".to_string(); 101];
    assert_eq!(r.client.receipts(&big).unwrap_err().code(), Some("validation"));
    let err: Result<serde_json::Value, _> = r.client.get("/v1/consistency?old=5&new=2");
    assert!(err.is_err());
    let err: Result<serde_json::Value, _> = r.client.get("/nowhere");
    assert_eq!(err.unwrap_err().code(), Some("not_found"));
}

#[test]
fn admin_endpoints_need_token_when_configured() {
    let r = start(BrokerConfig { admin_token: Some("s3cret".into()), ..seeded() });
    assert_eq!(r.client.publisher_health().unwrap_err().code(), Some("unauthorized"));
    let admin = BrokerClient::new(r.client.base_url()).with_admin_token("s3cret");
    assert!(admin.publisher_health().unwrap().is_empty());
    assert!(r.client.sth().is_ok());
}

#[test]
fn every_mutation_adds_a_leaf() {
    let r = start(seeded());
    let start = r.broker.ledger().size();
    for i in 0..5u64 {
        let issued = r.client.issue_license(&request(&format!("/p/{i}"))).unwrap();
        assert_eq!(r.broker.ledger().size(), start + i + 1);
        assert_eq!(issued.leaf_index, start + i);
    }
}

#[test]
fn restart_recovers_root_and_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BrokerConfig { data_dir: Some(dir.path().to_path_buf()), ..seeded() };
    let clock = Arc::new(ManualClock::new(T0));
    let (root, jwks, txn) = {
        let b = Broker::open(cfg.clone(), clock.clone(), Arc::new(NoFetch)).unwrap();
        let mut txn = String::new();
        for i in 0..20 {
            txn = b.issue_license(&request(&format!("/r/{i}"))).unwrap().txn_id;
        }
        clock.advance_secs(61);
        b.latest_sth().unwrap();
        (b.ledger().head().1, b.jwks(), txn)
    };
    let b = Broker::open(cfg, clock.clone(), Arc::new(NoFetch)).unwrap();
    assert_eq!(b.ledger().head(), (20, root));
    assert_eq!(b.jwks(), jwks);
    assert_eq!(b.sth_history().last().unwrap().tree_size, 20);
    assert!(b.ledger().has_license(&txn));
    let now = clock.now();
    assert!(b.sth_history().iter().all(|s| s.timestamp <= now * 1000));
}
