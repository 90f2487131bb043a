//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! every criterion reports even when an earlier one fails.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use aegon_audit::{Auditor, AuditorState, Exit, HttpTransport};
use aegon_broker::fetch::NoFetch;
use aegon_broker::http::{router, BackgroundServer};
use aegon_broker::service::{ProofTarget, RegisterDevice, RegisterPlatform};
use aegon_broker::{Broker, BrokerConfig};
use aegon_core::attestation::{decode_challenge, ReceiptItemResult, TrustAnchor};
use aegon_core::clock::{Clock, ManualClock};
use aegon_core::device::{DeviceProfile, FlushOptions, ReceiptRequest, ReceiptSubmitter, SimDevice};
use aegon_core::edge::{ContentHashReport, TransportError};
use aegon_core::ids::new_txn_id;
use aegon_core::keys::Jwk;
use aegon_core::ledger::{EntryType, Ledger, NewEntry};
use aegon_core::logfile::{RecordLog, MAGIC};
use aegon_core::merkle::{leaf_hash, verify_consistency_path, verify_inclusion_path, MerkleTree};
use aegon_core::provenance::{fingerprint, EventBody, ProvenanceEventType, SignedEvent};
use aegon_core::spotcheck::{epoch_salt, publisher_health, SpotCheckPolicy, SpotCheckResult, Verdict, DEFAULT_RATE};
use aegon_core::sth::SignedTreeHead;
use aegon_core::token::LicenseType;
use aegon_harness::bench::{self, BenchEnv};
use aegon_harness::publisher::{PUBLISHER_DOMAIN, PUBLISHER_ORIGIN};
use aegon_harness::world::{World, PLATFORM_ID, T0};
use aegon_harness::{run_all, run_scenario, Kind};
use p256::ecdsa::SigningKey;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;
use sha2::{Digest as _, Sha256};

type Hash = [u8; 32];

/// Brute-force Merkle tree written directly from the RFC 6962 definitions.
mod oracle {
    use super::*;

    pub fn sha(parts: &[&[u8]]) -> Hash {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        h.finalize().into()
    }

    pub fn leaf(data: &[u8]) -> Hash {
        sha(&[&[0u8], data])
    }

    fn split(n: usize) -> usize {
        let mut k = 1;
        while k * 2 < n {
            k *= 2;
        }
        k
    }

    /// MTH over leaf hashes.
    pub fn mth(d: &[Hash]) -> Hash {
        match d.len() {
            0 => sha(&[]),
            1 => d[0],
            n => {
                let k = split(n);
                sha(&[&[1u8], &mth(&d[..k]), &mth(&d[k..])])
            }
        }
    }

    /// PATH(m, D[n]).
    pub fn path(m: usize, d: &[Hash]) -> Vec<Hash> {
        let n = d.len();
        if n <= 1 {
            return Vec::new();
        }
        let k = split(n);
        if m < k {
            let mut p = path(m, &d[..k]);
            p.push(mth(&d[k..]));
            p
        } else {
            let mut p = path(m - k, &d[k..]);
            p.push(mth(&d[..k]));
            p
        }
    }

    /// PROOF(m, D[n]) = SUBPROOF(m, D[n], true).
    pub fn proof(m: usize, d: &[Hash]) -> Vec<Hash> {
        subproof(m, d, true)
    }

    fn subproof(m: usize, d: &[Hash], whole: bool) -> Vec<Hash> {
        let n = d.len();
        if m == n {
            return if whole { Vec::new() } else { vec![mth(d)] };
        }
        let k = split(n);
        if m <= k {
            let mut p = subproof(m, &d[..k], whole);
            p.push(mth(&d[k..]));
            p
        } else {
            let mut p = subproof(m - k, &d[k..], false);
            p.push(mth(&d[..k]));
            p
        }
    }
}

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn flip(h: &Hash, bit: usize) -> Hash {
    let mut out = *h;
    out[bit / 8] ^= 1 << (bit % 8);
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0x6d65_726b);
    let (mut roots, mut inclusion, mut consistency, mut mutations, mut caught) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut failures = Vec::new();
    for ledger_no in 0..200 {
        let n = rng.gen_range(1..=512usize);
        let ledger = Ledger::in_memory();
        for i in 0..n {
            let mut blob = vec![0u8; rng.gen_range(0..48)];
            rng.fill_bytes(&mut blob);
            ledger
                .append(NewEntry {
                    txn_id: format!("txn_{ledger_no}_{i}"),
                    entry_type: EntryType::LicenseIssued,
                    payload: json!({"blob": hex::encode(&blob)}),
                    server_timestamp: rng.gen_range(0..i64::from(u32::MAX)),
                })
                .expect("append");
        }
        let leaves: Vec<Hash> = (0..n as u64).map(|i| oracle::leaf(&ledger.entry(i).expect("entry").bytes)).collect();
        let oracle_roots: Vec<Hash> = (0..=n).map(|p| oracle::mth(&leaves[..p])).collect();
        for (p, expected) in oracle_roots.iter().enumerate().skip(1) {
            roots += 1;
            if ledger.root_hash(p as u64).expect("root") != *expected {
                failures.push(format!("ledger {ledger_no}: root({p}) differs"));
            }
        }

        let sizes = [n, rng.gen_range(1..=n)];
        for &size in &sizes {
            let root = oracle_roots[size];
            for i in 0..size {
                let proof = ledger.inclusion_proof(i as u64, size as u64).expect("inclusion proof");
                inclusion += 1;
                if proof.audit_path != oracle::path(i, &leaves[..size]) || !verify_inclusion_path(i as u64, size as u64, &leaves[i], &proof.audit_path, &root) {
                    failures.push(format!("ledger {ledger_no}: inclusion {i}/{size}"));
                }
            }
        }
        let new_root = oracle_roots[n];
        for (m, old_root) in oracle_roots.iter().enumerate().skip(1) {
            let proof = ledger.consistency_proof(m as u64, n as u64).expect("consistency proof");
            consistency += 1;
            if proof.path != oracle::proof(m, &leaves) || !verify_consistency_path(m as u64, n as u64, old_root, &new_root, &proof.path) {
                failures.push(format!("ledger {ledger_no}: consistency {m}->{n}"));
            }
        }

        for _ in 0..60 {
            mutations += 1;
            let rejected = if rng.gen_bool(0.5) {
                let i = rng.gen_range(0..n);
                let mut path = ledger.inclusion_proof(i as u64, n as u64).expect("proof").audit_path;
                let (mut leaf, mut root) = (leaves[i], new_root);
                let bit = rng.gen_range(0..256);
                match rng.gen_range(0..3) {
                    0 if !path.is_empty() => {
                        let j = rng.gen_range(0..path.len());
                        path[j] = flip(&path[j], bit);
                    }
                    1 => leaf = flip(&leaf, bit),
                    _ => root = flip(&root, bit),
                }
                !verify_inclusion_path(i as u64, n as u64, &leaf, &path, &root)
            } else {
                let m = rng.gen_range(1..=n);
                let mut path = ledger.consistency_proof(m as u64, n as u64).expect("proof").path;
                let (mut old, mut new) = (oracle_roots[m], new_root);
                let bit = rng.gen_range(0..256);
                match rng.gen_range(0..3) {
                    0 if !path.is_empty() => {
                        let j = rng.gen_range(0..path.len());
                        path[j] = flip(&path[j], bit);
                    }
                    1 => old = flip(&old, bit),
                    _ => new = flip(&new, bit),
                }
                !verify_consistency_path(m as u64, n as u64, &old, &new, &path)
            };
            if rejected {
                caught += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && mutations >= 10_000 && caught == mutations && secs < 60.0;
    let mut detail = format!(
        "200 ledgers: {roots} prefix roots, {inclusion} inclusion and {consistency} consistency proofs match the oracle; {caught}/{mutations} bit flips rejected; {secs:.1}s"
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} mismatches, first: {f}", failures.len()));
    }
    outcome(ok, detail)
}

/// Roots of the first n leaves of the Certificate Transparency reference
/// vectors.
const CT_LEAVES: [&str; 8] = ["", "00", "10", "2021", "3031", "40414243", "5051525354555657", "606162636465666768696a6b6c6d6e6f"];
const CT_ROOTS: [&str; 8] = [
    "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d",
    "fac54203e7cc696cf0dfcb42c92a1d9dbaf70ad9e621f4bd8d98662f00e3c125",
    "aeb6bcfe274b70a14fb067a5e5578264db0fa9b51af5e0ba159158f329e06e77",
    "d37ee418976dd95753c1c73862b9398fa2a2cf9b4ff0fdfe8b30cd95209614b7",
    "4e3bbb1f7b478dcfe71fb631631519a3bca12c9aefca1612bfce4c13a86264d4",
    "76e67dadbcdf1e10e1b74ddc608abd2f98dfb16fbce75277b5232a127f2087ef",
    "ddb89be403809e325750d3d263cd78929c2942b7942a34b77e122c9594a74c8c",
    "5dc9da79a70659a9ad559cb701ded9a2ab9d823aad2f4960cfe370eff4604328",
];

fn platform_key(seed: u64) -> SigningKey {
    SigningKey::random(&mut ChaCha20Rng::seed_from_u64(seed))
}

fn test_anchor(seed: u64) -> TrustAnchor {
    TrustAnchor::generate(&mut ChaCha20Rng::seed_from_u64(seed), "acceptance-root", T0 - 86_400)
}

fn register_platform(broker: &Broker, key: &SigningKey) {
    broker
        .register_platform(&RegisterPlatform { platform_id: PLATFORM_ID.into(), public_key: Jwk::from_key(key.verifying_key()) })
        .expect("platform registers");
}

fn register_device(broker: &Broker, anchor: &TrustAnchor, clock: Arc<ManualClock>, seed: u64) -> SimDevice {
    let c = broker.issue_challenge();
    let bytes = decode_challenge(&c.challenge).expect("challenge decodes");
    let device = SimDevice::provision(&bytes, DeviceProfile::default(), anchor, clock, seed);
    broker.register_device(&RegisterDevice { chain: device.chain().clone(), challenge: c.challenge }).expect("device registers");
    device
}

fn article(i: usize) -> (String, Vec<u8>) {
    let n = i % 8 + 1;
    (format!("{PUBLISHER_ORIGIN}/articles/{n}"), format!("<article>{n}</article>").into_bytes())
}

/// Licenses an article and records the publisher's hash of it.
fn licensed_txn(broker: &Broker, i: usize) -> (String, Vec<u8>) {
    let (url, body) = article(i);
    let issued = broker.issue_license(&World::license_request(&url, PUBLISHER_DOMAIN, LicenseType::SingleUse)).expect("license");
    broker
        .report_content_hash(&ContentHashReport {
            txn_id: issued.txn_id.clone(),
            content_sha256: fingerprint(&body),
            publisher_domain: PUBLISHER_DOMAIN.into(),
            observed_at: broker.now(),
        })
        .expect("hash recorded");
    (issued.txn_id, body)
}

fn receipt_request(txn_id: &str, body: &[u8]) -> ReceiptRequest {
    ReceiptRequest {
        txn_id: txn_id.into(),
        publisher_domain: PUBLISHER_DOMAIN.into(),
        content: body.to_vec(),
        license_type: LicenseType::SingleUse,
        training_allowed: false,
        storage_policy: "no_retention".into(),
    }
}

/// Seeded workload touching every entry type; returns the data directory
/// files and the serialized proofs.
fn deterministic_run(dir: &Path) -> (BTreeMap<String, Vec<u8>>, Vec<String>) {
    let clock = Arc::new(ManualClock::new(T0));
    let anchor = test_anchor(41);
    let config =
        BrokerConfig { data_dir: Some(dir.to_path_buf()), seed: Some(99), trust_roots: vec![anchor.public_jwk()], fsync: false, ..BrokerConfig::default() };
    let broker = Broker::open(config, clock.clone(), Arc::new(NoFetch)).expect("broker opens");
    let key = platform_key(42);
    register_platform(&broker, &key);
    let mut device = register_device(&broker, &anchor, clock.clone(), 43);
    let mut txns = Vec::new();
    for i in 0..40 {
        let (txn, body) = licensed_txn(&broker, i);
        let fp = fingerprint(&body);
        for kind in ProvenanceEventType::ALL {
            clock.advance_secs(1);
            let body = EventBody {
                txn_id: txn.clone(),
                event_type: kind.as_str().into(),
                content_fingerprint: fp.clone(),
                stage_detail: None,
                client_timestamp: clock.now(),
            };
            broker.record_provenance(&SignedEvent::sign(body, &key, PLATFORM_ID)).expect("event recorded");
        }
        if i % 4 == 0 {
            let (_, jws) = device.make_receipt(&receipt_request(&txn, &body));
            broker.submit_receipts(&[jws]).expect("receipt submitted");
        }
        txns.push(txn);
    }
    clock.advance_secs(61);
    let sth = broker.latest_sth().expect("sth");
    let mut proofs = vec![serde_json::to_string(&sth).expect("sth serializes")];
    for t in &txns {
        proofs.push(serde_json::to_string(&broker.inclusion_proof(ProofTarget::Txn(t), None).expect("proof")).expect("proof serializes"));
    }
    proofs.push(serde_json::to_string(&broker.consistency_proof(10, sth.tree_size).expect("consistency")).expect("serializes"));
    drop(broker);
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).expect("data dir") {
        let e = e.expect("dir entry");
        files.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("file"));
    }
    (files, proofs)
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let data: Vec<Vec<u8>> = CT_LEAVES.iter().map(|h| hex::decode(h).expect("hex")).collect();
    let mut tree = MerkleTree::new();
    let mut oracle_leaves = Vec::new();
    for (i, d) in data.iter().enumerate() {
        tree.push(leaf_hash(d));
        oracle_leaves.push(oracle::leaf(d));
        let core = hex::encode(tree.root(i as u64 + 1).expect("root"));
        let brute = hex::encode(oracle::mth(&oracle_leaves));
        if core != brute || core != CT_ROOTS[i] {
            ok = false;
            notes.push(format!("root({}) core {core} oracle {brute}", i + 1));
        }
    }
    if tree.root(0).expect("empty root") != oracle::sha(&[]) {
        ok = false;
        notes.push("empty root".into());
    }
    for (i, d) in data.iter().enumerate() {
        if leaf_hash(d) != oracle::leaf(d) {
            ok = false;
            notes.push(format!("leaf {i}"));
        }
    }
    notes.push("8 reference roots and the empty root reproduced".into());

    let (a, b) = (tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp"));
    let (files_a, proofs_a) = deterministic_run(a.path());
    let (files_b, proofs_b) = deterministic_run(b.path());
    let same_files = files_a == files_b && files_a.contains_key("ledger.aegl") && files_a.contains_key("sth.aegl");
    let same_proofs = proofs_a == proofs_b;
    ok &= same_files && same_proofs;
    let bytes: usize = files_a.values().map(Vec::len).sum();
    notes.push(format!(
        "two seeded runs: {} files ({bytes} bytes) {}, {} proofs {}",
        files_a.len(),
        if same_files { "identical" } else { "DIFFER" },
        proofs_a.len(),
        if same_proofs { "identical" } else { "DIFFER" }
    ));

    let bin = env!("CARGO_BIN_EXE_aegon-harness");
    let run = || std::process::Command::new(bin).args(["scenario", "all", "--seed", "3", "--json"]).output().expect("harness binary runs");
    let (x, y) = (run(), run());
    let same_cli = x.status.success() && x.stdout == y.stdout && !x.stdout.is_empty();
    ok &= same_cli;
    notes.push(format!("scenario reports over two processes {}", if same_cli { "identical" } else { "DIFFER" }));
    outcome(ok, notes.join("; "))
}

fn criterion_3() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in [1u64, 2, 3] {
        let reports = run_all(seed);
        let attacks: Vec<_> = reports.iter().filter(|r| r.kind == Kind::Attack).collect();
        let quiet: Vec<_> = reports.iter().filter(|r| r.kind == Kind::Undetectable).collect();
        let detected = attacks.iter().filter(|r| r.passed && r.detected).count();
        let silent = quiet.iter().filter(|r| r.passed && !r.detected).count();
        let seed_ok = attacks.len() == 13 && detected == 13 && quiet.len() == 2 && silent == 2;
        ok &= seed_ok;
        let mut line = format!("seed {seed}: {detected}/{} attacks detected, {silent}/{} undetectable without alert", attacks.len(), quiet.len());
        for r in attacks.iter().filter(|r| !r.passed).chain(quiet.iter().filter(|r| !r.passed)) {
            line.push_str(&format!(" [{} observed {}]", r.name, r.observed));
        }
        notes.push(line);
    }
    outcome(ok, notes.join("; "))
}

fn criterion_4() -> Outcome {
    let env = match BenchEnv::start(21) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("bench setup: {e}")),
    };
    let samples = bench::MIN_SAMPLES;
    let cells = [
        bench::bench_validation(&env, samples),
        bench::bench_issuance(&env, 100.0, 3_000),
        bench::bench_provenance(&env, samples),
        bench::bench_chain_verification(samples, 23),
    ];
    let (_, receipt_bytes) = bench::bench_receipt_signing(200, 29);
    let sustained = cells[1].samples >= 3_000 && cells[1].achieved_rate >= 95.0;
    let ok = cells.iter().all(|c| c.pass == Some(true)) && sustained && receipt_bytes < bench::RECEIPT_MAX_BYTES;
    let mut parts: Vec<String> = cells
        .iter()
        .map(|c| format!("{} P95 {:.3} ms (< {} ms, n={}, errors {})", c.operation, c.p95_ms, c.target_p95_ms.unwrap_or(f64::NAN), c.samples, c.errors))
        .collect();
    parts.push(format!("issuance sustained {:.1} req/s over {} requests", cells[1].achieved_rate, cells[1].samples));
    parts.push(format!("receipt JWS {receipt_bytes} bytes (< {})", bench::RECEIPT_MAX_BYTES));
    outcome(ok, parts.join("; "))
}

fn health_after(verdicts: &[Verdict]) -> (u32, bool) {
    let results: Vec<SpotCheckResult> = verdicts
        .iter()
        .enumerate()
        .map(|(i, v)| SpotCheckResult {
            txn_id: format!("txn_{i}"),
            publisher_domain: PUBLISHER_DOMAIN.into(),
            broker_hash: Some("a".into()),
            publisher_hash: Some("b".into()),
            platform_hash: None,
            verdict: *v,
            checked_at: i as i64,
        })
        .collect();
    let h = &publisher_health(&results, 3)[0];
    (h.consecutive_mismatches, h.escalated)
}

fn criterion_5() -> Outcome {
    use Verdict::{Mismatch as M, Verified as V};
    let mut rng = ChaCha20Rng::seed_from_u64(0x73706f74);
    let txns: Vec<String> = (0..100_000).map(|_| new_txn_id(&mut rng)).collect();
    let policy = SpotCheckPolicy::new(DEFAULT_RATE);
    let mut ok = true;
    let mut fractions = Vec::new();
    for epoch in [T0, T0 + 86_400, T0 + 7 * 86_400] {
        let salt = epoch_salt(b"aegon-spot-check", epoch);
        let selected = txns.iter().filter(|t| policy.selects(t, PUBLISHER_DOMAIN, &salt)).count();
        let f = selected as f64 / txns.len() as f64;
        ok &= (f - 0.05).abs() <= 0.005;
        fractions.push(format!("{f:.4}"));
    }

    let fixture = [(vec![M, M], false), (vec![M, M, M], true), (vec![M, M, V, M, M], false), (vec![M, M, M, V], true)];
    let fold_ok = fixture.iter().all(|(v, escalated)| health_after(v).1 == *escalated);
    ok &= fold_ok;

    let live = run_scenario("content_hash_mismatch", 5).expect("known scenario");
    let verdicts = live.facts.get("verdicts").cloned().unwrap_or_default();
    let live_ok = live.passed && verdicts == json!(["mismatch", "mismatch", "mismatch"]) && live.facts.get("escalated_after") == Some(&json!(3));
    ok &= live_ok;
    outcome(
        ok,
        format!(
            "selection fraction over 100000 txn ids in 3 epochs: {} (0.05 +/- 0.005); health fold fixture {}; live mismatch fixture verdicts {verdicts}, escalated after {}",
            fractions.join(", "),
            if fold_ok { "escalates exactly at 3 consecutive" } else { "WRONG" },
            live.facts.get("escalated_after").cloned().unwrap_or_default()
        ),
    )
}

/// Delivers batches to an in-process broker, losing some requests before
/// delivery and some responses after.
struct LossySubmitter<'a> {
    broker: &'a Broker,
    rng: RefCell<ChaCha20Rng>,
    loss: f64,
}

impl<'a> LossySubmitter<'a> {
    fn lossless(broker: &'a Broker) -> Self {
        Self { broker, rng: RefCell::new(ChaCha20Rng::seed_from_u64(0)), loss: 0.0 }
    }
}

impl ReceiptSubmitter for LossySubmitter<'_> {
    fn submit(&self, batch: &[String]) -> Result<Vec<ReceiptItemResult>, TransportError> {
        let (lose_request, lose_response) = {
            let mut r = self.rng.borrow_mut();
            (r.gen_bool(self.loss), r.gen_bool(self.loss))
        };
        if lose_request {
            return Err(TransportError("connection reset".into()));
        }
        let out = self.broker.submit_receipts(batch).map_err(|e| TransportError(e.to_string()))?;
        if lose_response {
            return Err(TransportError("response lost".into()));
        }
        Ok(out)
    }
}

struct ReceiptBed {
    clock: Arc<ManualClock>,
    broker: Broker,
    device: SimDevice,
}

impl ReceiptBed {
    fn new(seed: u64) -> Self {
        let clock = Arc::new(ManualClock::new(T0));
        let anchor = test_anchor(seed ^ 0x726f_6f74);
        let config = BrokerConfig { seed: Some(seed), trust_roots: vec![anchor.public_jwk()], ..BrokerConfig::default() };
        let broker = Broker::open(config, clock.clone(), Arc::new(NoFetch)).expect("broker opens");
        let device = register_device(&broker, &anchor, clock.clone(), seed);
        Self { clock, broker, device }
    }

    fn queue(&mut self, n: usize) -> Vec<String> {
        let txns: Vec<(String, Vec<u8>)> = (0..n.min(16)).map(|i| licensed_txn(&self.broker, i)).collect();
        (0..n)
            .map(|i| {
                let (txn, body) = &txns[i % txns.len()];
                self.device.record_consumption(&receipt_request(txn, body)).expect("queued").receipt_id
            })
            .collect()
    }

    fn accepted_counts(&self) -> HashMap<String, usize> {
        let mut counts = HashMap::new();
        for e in self.broker.ledger().entries_of_type(EntryType::ReceiptAccepted) {
            *counts.entry(e.entry.payload["receipt_id"].as_str().unwrap_or_default().to_string()).or_default() += 1;
        }
        counts
    }
}

fn criterion_6() -> Outcome {
    let mut notes = Vec::new();

    let mut bed = ReceiptBed::new(61);
    let ids = bed.queue(250);
    let report = bed.device.flush(&LossySubmitter::lossless(&bed.broker), &|_: i64| true, &FlushOptions::default()).expect("flush");
    let counts = bed.accepted_counts();
    let batching_ok =
        report.batch_sizes == vec![100, 100, 50] && report.accepted.len() == 250 && report.remaining == 0 && ids.iter().all(|id| counts.get(id) == Some(&1));
    notes.push(format!("250 queued drained in batches {:?}, {} accepted", report.batch_sizes, report.accepted.len()));

    let mut bed = ReceiptBed::new(62);
    bed.queue(5);
    let before = bed.clock.now_ms();
    let opts = FlushOptions { max_attempts: 9, ..FlushOptions::default() };
    let report = bed.device.flush(&LossySubmitter::lossless(&bed.broker), &|_: i64| false, &opts).expect("flush");
    let base: Vec<u64> = report.base_delays.iter().map(Duration::as_secs).collect();
    let jitter_ok = report.base_delays.iter().zip(&report.delays).all(|(b, d)| *d >= *b && d.as_secs_f64() < b.as_secs_f64() * 1.5);
    let slept: i64 = report.delays.iter().map(|d| d.as_millis() as i64).sum();
    let clock_ok = bed.clock.now_ms() - before == slept;
    let backoff_ok = base == vec![1, 2, 4, 8, 16, 32, 60, 60] && jitter_ok && clock_ok && report.remaining == 5;
    notes.push(format!("offline base delays {base:?} s, jitter within [1, 1.5) {jitter_ok}, clock advanced by the jittered sum {clock_ok}"));

    let mut exact = 0;
    let mut worst = String::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut bed = ReceiptBed::new(1_000 + seed);
        let ids = bed.queue(rng.gen_range(1..=250));
        let mut edges = Vec::new();
        let mut t = bed.clock.now_ms();
        for _ in 0..400 {
            t += rng.gen_range(1_000..600_000);
            edges.push(t);
        }
        let online_first = rng.gen_bool(0.5);
        let connectivity = move |now: i64| (edges.partition_point(|e| *e <= now) % 2 == 0) == online_first;
        let lossy = LossySubmitter { broker: &bed.broker, rng: RefCell::new(ChaCha20Rng::seed_from_u64(seed ^ 0x6c6f_7373)), loss: rng.gen_range(0.0..0.4) };
        let mut flushes = 0;
        while !bed.device.queue().is_empty() && flushes < 200 {
            bed.device.flush(&lossy, &connectivity, &FlushOptions::default()).expect("flush");
            flushes += 1;
        }
        let counts = bed.accepted_counts();
        let once = bed.device.queue().is_empty() && counts.len() == ids.len() && ids.iter().all(|id| counts.get(id) == Some(&1));
        if once {
            exact += 1;
        } else if worst.is_empty() {
            worst = format!("seed {seed}: {} ids, {} accepted ids, queue {}", ids.len(), counts.len(), bed.device.queue().len());
        }
    }
    notes.push(format!(
        "{exact}/100 randomized connectivity seeds with lossy transport end with exactly one receipt_accepted per receipt_id{}",
        if worst.is_empty() { String::new() } else { format!(" ({worst})") }
    ));
    outcome(batching_ok && backoff_ok && exact == 100, notes.join("; "))
}

/// Byte offsets at which each record of a record log ends.
fn record_ends(bytes: &[u8]) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut at = MAGIC.len() + 1;
    while at + 4 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let end = at + 4 + len + 4;
        if end > bytes.len() {
            break;
        }
        ends.push(end);
        at = end;
    }
    ends
}

fn criterion_7() -> Outcome {
    let work = tempfile::tempdir().expect("tmp");
    let clock = Arc::new(ManualClock::new(T0));
    let config = BrokerConfig { data_dir: Some(work.path().to_path_buf()), seed: Some(77), fsync: false, ..BrokerConfig::default() };
    let broker = Broker::open(config.clone(), clock.clone(), Arc::new(NoFetch)).expect("broker opens");
    for i in 0..10_000 {
        let (url, _) = article(i);
        broker.issue_license(&World::license_request(&url, PUBLISHER_DOMAIN, LicenseType::Session)).expect("license");
    }
    drop(broker);
    let ledger_bytes = std::fs::read(work.path().join("ledger.aegl")).expect("ledger file");
    let records = RecordLog::read(work.path().join("ledger.aegl")).expect("ledger records");
    let sth_records = RecordLog::read(work.path().join("sth.aegl")).expect("sth records");
    let heads: Vec<SignedTreeHead> = sth_records.iter().map(|r| serde_json::from_slice(r).expect("sth record")).collect();
    let keys = std::fs::read(work.path().join("keys.json")).expect("keys");
    let ends = record_ends(&ledger_bytes);
    if records.len() != 10_000 || ends.len() != 10_000 {
        return outcome(false, format!("workload wrote {} records", records.len()));
    }
    let leaves: Vec<Hash> = records.iter().map(|r| oracle::leaf(r)).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(0x6372_6173);
    let mut failures = Vec::new();
    let mut torn = 0;
    let mut recovered_sizes = Vec::new();
    for trial in 0..50 {
        let cut = rng.gen_range(MAGIC.len() + 1..=ledger_bytes.len());
        let k = ends.partition_point(|e| *e <= cut);
        if ends.get(k.wrapping_sub(1)).copied().unwrap_or(MAGIC.len() + 1) != cut {
            torn += 1;
        }
        let dir = tempfile::tempdir().expect("tmp");
        std::fs::write(dir.path().join("ledger.aegl"), &ledger_bytes[..cut]).expect("write prefix");
        std::fs::write(dir.path().join("keys.json"), &keys).expect("write keys");
        let seen: Vec<Vec<u8>> = heads.iter().zip(&sth_records).filter(|(h, _)| h.tree_size <= k as u64).map(|(_, r)| r.clone()).collect();
        RecordLog::rewrite(dir.path().join("sth.aegl"), &seen, false).expect("write sth history");
        let last_seen = seen.last().cloned().expect("initial head precedes every append");

        let clock = Arc::new(ManualClock::new(T0));
        let config = BrokerConfig { data_dir: Some(dir.path().to_path_buf()), ..config.clone() };
        let broker = match Broker::open(config, clock.clone(), Arc::new(NoFetch)) {
            Ok(b) => Arc::new(b),
            Err(e) => {
                failures.push(format!("trial {trial} cut {cut}: reopen failed: {e}"));
                continue;
            }
        };
        let size = broker.ledger().size();
        recovered_sizes.push(size);
        if size != k as u64 || broker.ledger().root_hash(size).ok() != Some(oracle::mth(&leaves[..k])) {
            failures.push(format!("trial {trial} cut {cut}: recovered size {size}, expected {k} with the oracle root"));
            continue;
        }

        let audit_dir = tempfile::tempdir().expect("tmp");
        {
            let (mut log, _) = RecordLog::open(audit_dir.path().join("sth-history.aegl"), true).expect("auditor state");
            log.append(&last_seen).expect("seed auditor state");
        }
        let mut server = BackgroundServer::start(router(broker.clone()), None).expect("server");
        clock.advance_secs(61);
        let state = AuditorState::open(audit_dir.path()).expect("auditor state");
        let report = Auditor::new(HttpTransport::new(&server.url()), state).cmd_consistency(None, None);
        server.stop();
        if report.exit != Exit::Ok || !report.lines.iter().any(|l| l.starts_with("CONSISTENT")) {
            failures.push(format!("trial {trial} cut {cut}: auditor {:?} {:?}", report.exit, report.lines));
        }
    }
    let detail = format!(
        "50 crash points over a 10000-append ledger ({torn} inside a record), recovered sizes {}..{}; every root matches the oracle and the auditor reports CONSISTENT from the last pre-crash head: {}",
        recovered_sizes.iter().min().unwrap_or(&0),
        recovered_sizes.iter().max().unwrap_or(&0),
        if failures.is_empty() { "yes".to_string() } else { format!("{} failures, first: {}", failures.len(), failures[0]) }
    );
    outcome(failures.is_empty(), detail)
}

fn criterion_8() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in [1u64, 8] {
        let web = run_scenario("happy_path_web", seed).expect("known scenario");
        let mobile = run_scenario("happy_path_mobile", seed).expect("known scenario");
        let f = &web.facts;
        let web_ok = web.passed
            && f.get("edge_broker_calls") == Some(&json!(0))
            && f.get("txn_header").is_some_and(|v| v.as_str().is_some_and(|s| s.starts_with("txn_")))
            && f.get("publisher_hash_recorded") == Some(&json!(true))
            && f.get("chain_order_valid") == Some(&json!(true))
            && f.get("chain_stages") == Some(&json!(5))
            && f.get("auditor_exit") == Some(&json!(0));
        let m = &mobile.facts;
        let mobile_ok = mobile.passed && m.get("receipt_accepted") == Some(&json!(true)) && m.get("auditor_exit") == Some(&json!(0));
        ok &= web_ok && mobile_ok;
        notes.push(format!(
            "seed {seed}: web edge broker calls {}, txn header {}, publisher hash {}, chain order_valid {} over {} stages, auditor exit {}; mobile receipt accepted {}, auditor exit {}",
            f.get("edge_broker_calls").cloned().unwrap_or_default(),
            f.get("txn_header").cloned().unwrap_or_default(),
            f.get("publisher_hash_recorded").cloned().unwrap_or_default(),
            f.get("chain_order_valid").cloned().unwrap_or_default(),
            f.get("chain_stages").cloned().unwrap_or_default(),
            f.get("auditor_exit").cloned().unwrap_or_default(),
            m.get("receipt_accepted").cloned().unwrap_or_default(),
            m.get("auditor_exit").cloned().unwrap_or_default(),
        ));
    }
    outcome(ok, notes.join("; "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("Merkle oracle equivalence", criterion_1),
        ("RFC 6962 cross-check and determinism", criterion_2),
        ("attack matrix", criterion_3),
        ("performance targets", criterion_4),
        ("spot-check statistics", criterion_5),
        ("offline batching and exactly-once acceptance", criterion_6),
        ("crash consistency", criterion_7),
        ("end-to-end happy paths", criterion_8),
    ];
    let only: Option<usize> = std::env::var("AEGON_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.ok {
            failed += 1;
        }
        println!("criterion {n}: {} {name} ({:.1}s): {}", if result.ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64(), result.detail);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
