//! Built-in protocol scenarios: the two happy paths, the attack matrix and
//! the two adversaries the protocol cannot see.
//!
//! Every scenario runs in a fresh [`World`] seeded from `seed` with the clock
//! at [`crate::world::T0`], so the transcript is a pure function of
//! `(name, seed)`.

use std::collections::BTreeMap;
use std::fmt::Display;

use aegon_audit::AuditorState;
use aegon_broker::client::ClientError;
use aegon_broker::service::{EntryBytes, IssueResponse};
use aegon_core::attestation::{BootState, ReceiptItemResult, SecurityLevel};
use aegon_core::clock::Clock;
use aegon_core::device::{DeviceProfile, FlushOptions, ReceiptRequest, SimDevice};
use aegon_core::jws::{self, CompactJws};
use aegon_core::ledger::{EntryType, LedgerEntry};
use aegon_core::logfile::MAGIC;
use aegon_core::merkle::{digest_hex, leaf_hash, InclusionProof};
use aegon_core::provenance::{fingerprint, ChainStatus, HashMatch, ProvenanceEventType};
use aegon_core::spotcheck::Verdict;
use aegon_core::sth::verify_inclusion;
use aegon_core::token::LicenseType;
use p256::ecdsa::SigningKey;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::publisher::PUBLISHER_DOMAIN;
use crate::world::{PublisherReply, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    HappyPath,
    Attack,
    Undetectable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub kind: Kind,
    pub expected: String,
    pub observed: String,
    pub detected: bool,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub facts: BTreeMap<String, Value>,
    pub transcript: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown scenario {0}")]
pub struct UnknownScenario(pub String);

struct Outcome {
    detected: bool,
    observed: String,
}

type Run = fn(&mut Ctx) -> Result<Outcome, String>;

struct Scenario {
    name: &'static str,
    kind: Kind,
    expected: &'static str,
    spot_check_rate: Option<f64>,
    persistent: bool,
    run: Run,
}

const SCENARIOS: &[Scenario] = &[
    Scenario {
        name: "happy_path_web",
        kind: Kind::HappyPath,
        expected: "token validated offline, Aegon-Txn-Id returned, publisher hash recorded, 5-stage chain order_valid, auditor inclusion exit 0",
        spot_check_rate: None,
        persistent: false,
        run: happy_path_web,
    },
    Scenario {
        name: "happy_path_mobile",
        kind: Kind::HappyPath,
        expected: "STRONGBOX device registered, receipt queued offline then accepted, receipt leaf included under a signed tree head",
        spot_check_rate: None,
        persistent: false,
        run: happy_path_mobile,
    },
    Scenario {
        name: "replay_single_use",
        kind: Kind::Attack,
        expected: "second request denied replayed",
        spot_check_rate: None,
        persistent: false,
        run: replay_single_use,
    },
    Scenario {
        name: "forged_token_signature",
        kind: Kind::Attack,
        expected: "denied bad_signature",
        spot_check_rate: None,
        persistent: false,
        run: forged_token_signature,
    },
    Scenario { name: "expired_token", kind: Kind::Attack, expected: "denied expired", spot_check_rate: None, persistent: false, run: expired_token },
    Scenario { name: "wrong_audience", kind: Kind::Attack, expected: "denied wrong_audience", spot_check_rate: None, persistent: false, run: wrong_audience },
    Scenario {
        name: "resource_mismatch",
        kind: Kind::Attack,
        expected: "denied resource_mismatch",
        spot_check_rate: None,
        persistent: false,
        run: resource_mismatch,
    },
    Scenario {
        name: "unlocked_bootloader",
        kind: Kind::Attack,
        expected: "registration rejected unlocked_bootloader",
        spot_check_rate: None,
        persistent: false,
        run: unlocked_bootloader,
    },
    Scenario {
        name: "software_attestation",
        kind: Kind::Attack,
        expected: "registration rejected software_level",
        spot_check_rate: None,
        persistent: false,
        run: software_attestation,
    },
    Scenario {
        name: "duplicate_receipt",
        kind: Kind::Attack,
        expected: "resubmission rejected duplicate_receipt, one receipt_accepted entry",
        spot_check_rate: None,
        persistent: false,
        run: duplicate_receipt,
    },
    Scenario {
        name: "stale_receipt_8d",
        kind: Kind::Attack,
        expected: "receipt rejected stale_receipt",
        spot_check_rate: None,
        persistent: false,
        run: stale_receipt_8d,
    },
    Scenario {
        name: "content_hash_mismatch",
        kind: Kind::Attack,
        expected: "spot-check verdict mismatch, publisher escalated on the 3rd consecutive mismatch",
        spot_check_rate: Some(1.0),
        persistent: false,
        run: content_hash_mismatch,
    },
    Scenario {
        name: "provenance_out_of_order",
        kind: Kind::Attack,
        expected: "chain order_valid false",
        spot_check_rate: None,
        persistent: false,
        run: provenance_out_of_order,
    },
    Scenario {
        name: "backdated_provenance_timestamp",
        kind: Kind::Attack,
        expected: "skew flag on the backdated event",
        spot_check_rate: None,
        persistent: false,
        run: backdated_provenance_timestamp,
    },
    Scenario {
        name: "ledger_rollback_detected_by_auditor",
        kind: Kind::Attack,
        expected: "auditor consistency ROLLBACK alert, exit 1",
        spot_check_rate: None,
        persistent: true,
        run: ledger_rollback_detected_by_auditor,
    },
    Scenario {
        name: "parallel_pipeline",
        kind: Kind::Undetectable,
        expected: "no alert: chain valid, spot-check verified, auditor exit 0",
        spot_check_rate: Some(1.0),
        persistent: false,
        run: parallel_pipeline,
    },
    Scenario {
        name: "omitted_provenance_events",
        kind: Kind::Undetectable,
        expected: "no alert: chain order_valid with stages missing",
        spot_check_rate: None,
        persistent: false,
        run: omitted_provenance_events,
    },
];

pub fn scenario_names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|s| s.name).collect()
}

pub fn scenario_kind(name: &str) -> Option<Kind> {
    SCENARIOS.iter().find(|s| s.name == name).map(|s| s.kind)
}

pub fn run_scenario(name: &str, seed: u64) -> Result<ScenarioReport, UnknownScenario> {
    let s = SCENARIOS.iter().find(|s| s.name == name).ok_or_else(|| UnknownScenario(name.to_string()))?;
    let tmp = if s.persistent { tempfile::tempdir().ok() } else { None };
    let mut cfg = WorldConfig::new(seed);
    if let Some(rate) = s.spot_check_rate {
        cfg.spot_check_rate = rate;
    }
    cfg.data_dir = tmp.as_ref().map(|t| t.path().join("broker"));

    let mut report = ScenarioReport {
        name: s.name.into(),
        seed,
        kind: s.kind,
        expected: s.expected.into(),
        observed: String::new(),
        detected: false,
        passed: false,
        checks: Vec::new(),
        facts: BTreeMap::new(),
        transcript: Vec::new(),
    };
    let world = match World::start(cfg) {
        Ok(w) => w,
        Err(e) => {
            report.observed = format!("setup failed: {e}");
            return Ok(report);
        }
    };
    let mut ctx = Ctx { w: world, transcript: Vec::new(), checks: Vec::new(), facts: BTreeMap::new(), tmp };
    let result = (s.run)(&mut ctx);
    report.transcript = ctx.transcript;
    report.checks = ctx.checks;
    report.facts = ctx.facts;
    let checks_ok = report.checks.iter().all(|c| c.ok);
    match result {
        Ok(o) => {
            report.detected = o.detected;
            report.observed = o.observed;
            report.passed = checks_ok
                && match s.kind {
                    Kind::HappyPath | Kind::Undetectable => !o.detected,
                    Kind::Attack => o.detected,
                };
        }
        Err(e) => report.observed = format!("error: {e}"),
    }
    report.transcript.push(format!("[result] {} expected: {} | observed: {}", if report.passed { "PASS" } else { "FAIL" }, report.expected, report.observed));
    Ok(report)
}

pub fn run_all(seed: u64) -> Vec<ScenarioReport> {
    SCENARIOS.iter().map(|s| run_scenario(s.name, seed).expect("listed scenario")).collect()
}

struct Ctx {
    w: World,
    transcript: Vec<String>,
    checks: Vec<Check>,
    facts: BTreeMap<String, Value>,
    tmp: Option<tempfile::TempDir>,
}

fn err<E: Display>(e: E) -> String {
    e.to_string()
}

impl Ctx {
    fn say(&mut self, actor: &str, msg: impl Display) {
        self.transcript.push(format!("[t+{}s] [{actor}] {msg}", self.w.now() - crate::world::T0));
    }

    fn check(&mut self, name: &str, ok: bool) -> bool {
        self.transcript.push(format!("[check] {name}: {}", if ok { "ok" } else { "FAILED" }));
        self.checks.push(Check { name: name.into(), ok });
        ok
    }

    fn fact(&mut self, key: &str, v: impl Serialize) {
        self.facts.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn license(&mut self, path: &str, lt: LicenseType) -> Result<IssueResponse, String> {
        let issued = self.w.license(path, lt).map_err(err)?;
        self.say("broker", format!("issued {} {} for {path} at leaf {}", lt.as_str(), issued.txn_id, issued.leaf_index));
        Ok(issued)
    }

    fn fetch(&mut self, path: &str, token: Option<&str>) -> Result<PublisherReply, String> {
        let r = self.w.fetch(path, token)?;
        match &r.error_code {
            None => {
                self.say("publisher", format!("GET {path} -> {} ({} bytes, txn header {})", r.status, r.body.len(), r.txn_header.as_deref().unwrap_or("-")))
            }
            Some(c) => self.say("publisher", format!("GET {path} -> {} denied {c}", r.status)),
        }
        Ok(r)
    }

    /// Licensed fetch that must succeed.
    fn licensed_fetch(&mut self, path: &str, lt: LicenseType) -> Result<(IssueResponse, PublisherReply), String> {
        let issued = self.license(path, lt)?;
        let reply = self.fetch(path, Some(&issued.token))?;
        if reply.status != 200 {
            return Err(format!("licensed fetch of {path} returned {}", reply.status));
        }
        Ok((issued, reply))
    }

    fn denial(&mut self, reply: &PublisherReply, expected: &str) -> Outcome {
        let code = reply.error_code.clone().unwrap_or_else(|| "none".into());
        self.fact("deny_reason", &code);
        Outcome { detected: reply.status == 403 && code == expected, observed: format!("HTTP {} {code}", reply.status) }
    }

    fn register_platform(&mut self) -> Result<(), String> {
        self.w.register_platform().map_err(err)?;
        self.say("platform", "registered provenance signing key");
        Ok(())
    }

    fn record(&mut self, txn: &str, fp: &str, kinds: &[ProvenanceEventType]) -> Result<(), String> {
        let acks = self.w.record_events(txn, fp, kinds).map_err(err)?;
        let names: Vec<String> = kinds.iter().zip(&acks).map(|(k, a)| format!("{}@{}", k.as_str(), a.leaf_index)).collect();
        self.say("platform", format!("recorded {}", names.join(", ")));
        Ok(())
    }

    fn chain(&mut self, txn: &str) -> Result<ChainStatus, String> {
        let s = self.w.client.chain_status(txn).map_err(err)?;
        let present: Vec<String> = s.events_present.iter().map(|(k, v)| format!("{k}={v}")).collect();
        self.say(
            "broker",
            format!(
                "chain {txn}: order_valid {} first_is_fetch {} flags {} fetch_vs_publisher {:?} [{}]",
                s.order_valid,
                s.first_event_is_fetch,
                s.timestamp_flags.len(),
                s.fetch_hash_matches_publisher,
                present.join(" ")
            ),
        );
        Ok(s)
    }

    fn entries(&self, txn: &str) -> Result<Vec<(EntryBytes, LedgerEntry)>, String> {
        self.w
            .client
            .entries(txn)
            .map_err(err)?
            .into_iter()
            .map(|e| {
                let bytes = hex::decode(&e.entry_hex).map_err(err)?;
                let decoded = LedgerEntry::decode(&bytes).map_err(err)?;
                Ok((e, decoded))
            })
            .collect()
    }

    fn publisher_hash(&self, txn: &str) -> Result<Option<String>, String> {
        Ok(self
            .entries(txn)?
            .into_iter()
            .find(|(e, _)| e.entry_type == EntryType::ContentHashReported)
            .and_then(|(_, d)| d.payload["content_sha256"].as_str().map(str::to_string)))
    }

    fn audit_inclusion(&mut self, txn: &str) -> i32 {
        let report = self.w.auditor(AuditorState::in_memory()).cmd_verify_inclusion(txn);
        self.say("auditor", format!("verify-inclusion {txn}: {} (exit {})", report.lines.join("; "), report.code()));
        report.code()
    }

    fn device(&mut self, profile: DeviceProfile) -> Result<(SimDevice, Result<aegon_core::attestation::DeviceRecord, ClientError>), String> {
        let (device, reg) = self.w.provision_device(profile).map_err(err)?;
        match &reg {
            Ok(r) => self.say("broker", format!("registered {} as {} ({:?})", r.device_id, r.security_level.as_str(), r.status)),
            Err(e) => self.say("broker", format!("registration of {} refused: {}", device.device_id(), e.code().unwrap_or("transport"))),
        }
        Ok((device, reg))
    }

    fn registered_device(&mut self) -> Result<SimDevice, String> {
        let (device, reg) = self.device(DeviceProfile::default())?;
        reg.map_err(err)?;
        Ok(device)
    }

    fn receipt_request(txn: &str, content: &[u8]) -> ReceiptRequest {
        ReceiptRequest {
            txn_id: txn.into(),
            publisher_domain: PUBLISHER_DOMAIN.into(),
            content: content.to_vec(),
            license_type: LicenseType::SingleUse,
            training_allowed: false,
            storage_policy: "no_retention".into(),
        }
    }

    fn submit(&mut self, batch: &[String]) -> Result<Vec<ReceiptItemResult>, String> {
        let results = self.w.client.receipts(batch).map_err(err)?;
        let shown: Vec<String> = results
            .iter()
            .map(|r| match r {
                ReceiptItemResult::Accepted { receipt_id, leaf_index } => format!("{receipt_id} accepted@{leaf_index}"),
                ReceiptItemResult::Rejected { reason } => format!("rejected {}", reason.code()),
            })
            .collect();
        self.say("broker", format!("receipts: {}", shown.join(", ")));
        Ok(results)
    }
}

fn happy_path_web(c: &mut Ctx) -> Result<Outcome, String> {
    c.register_platform()?;
    let path = "/articles/1";
    let issued = c.license(path, LicenseType::SingleUse)?;
    let before = c.w.publisher.edge_broker_calls();
    let reply = c.fetch(path, Some(&issued.token))?;
    let edge_calls = c.w.publisher.edge_broker_calls() - before;
    c.fact("edge_broker_calls", edge_calls);
    c.fact("txn_header", &reply.txn_header);
    c.check("content served", reply.status == 200);
    c.check("edge validator made no broker call", edge_calls == 0);
    c.check("Aegon-Txn-Id equals jti", reply.txn_header.as_deref() == Some(issued.txn_id.as_str()));

    let fp = fingerprint(&reply.body);
    let recorded = c.publisher_hash(&issued.txn_id)?;
    c.fact("publisher_hash_recorded", recorded.is_some());
    c.check("publisher hash recorded", recorded.as_deref() == Some(fp.as_str()));

    c.record(&issued.txn_id, &fp, ProvenanceEventType::ALL)?;
    let chain = c.chain(&issued.txn_id)?;
    let stages = chain.events_present.values().filter(|n| **n > 0).count();
    c.fact("chain_order_valid", chain.order_valid);
    c.fact("chain_stages", stages);
    c.check("5-stage chain order_valid", chain.order_valid && stages == 5 && chain.first_event_is_fetch);
    c.check("no timestamp flags", chain.timestamp_flags.is_empty());
    c.check("fetch hash matches publisher", chain.fetch_hash_matches_publisher == HashMatch::Match);

    c.w.clock.advance_secs(61);
    let exit = c.audit_inclusion(&issued.txn_id);
    c.fact("auditor_exit", exit);
    c.check("auditor inclusion exit 0", exit == 0);
    Ok(Outcome { detected: false, observed: format!("served, chain order_valid {} with {stages} stages, auditor exit {exit}", chain.order_valid) })
}

fn happy_path_mobile(c: &mut Ctx) -> Result<Outcome, String> {
    // Phase 1: device setup.
    let (mut device, reg) = c.device(DeviceProfile::default())?;
    let record = reg.map_err(err)?;
    c.fact("security_level", record.security_level.as_str());
    c.check("registered STRONGBOX", record.security_level == SecurityLevel::StrongBox);

    // Phase 2: access and receipt, while offline.
    let path = "/articles/2";
    let (issued, reply) = c.licensed_fetch(path, LicenseType::SingleUse)?;
    let receipt = device.record_consumption(&Ctx::receipt_request(&issued.txn_id, &reply.body)).map_err(err)?;
    let jws_len = device.queue().pending().next().map(|q| q.jws.len()).unwrap_or(0);
    c.fact("receipt_jws_bytes", jws_len);
    c.say("device", format!("queued {} for {} ({jws_len} byte JWS)", receipt.receipt_id, receipt.txn_id));
    c.check("receipt under 4096 bytes", jws_len > 0 && jws_len < 4096);

    // Phase 3: batch submission once connectivity returns.
    let online_at = c.w.clock.now_ms() + 3_000;
    let flush = device.flush(&c.w.client, &move |ms: i64| ms >= online_at, &FlushOptions::default()).map_err(err)?;
    let waits: Vec<String> = flush.base_delays.iter().map(|d| format!("{}s", d.as_secs())).collect();
    c.say(
        "device",
        format!(
            "flush: {} failed attempts (base backoff {}), batches {:?}, accepted {}",
            flush.failed_attempts,
            waits.join(","),
            flush.batch_sizes,
            flush.accepted.len()
        ),
    );
    let accepted = flush.accepted == vec![receipt.receipt_id.clone()] && flush.remaining == 0;
    c.fact("receipt_accepted", accepted);
    c.check("receipt accepted", accepted);

    let entry = c.entries(&issued.txn_id)?.into_iter().find(|(e, _)| e.entry_type == EntryType::ReceiptAccepted);
    let Some((entry, decoded)) = entry else {
        c.check("receipt_accepted ledger entry", false);
        return Ok(Outcome { detected: true, observed: "no receipt_accepted entry".into() });
    };
    c.check("receipt_accepted ledger entry", decoded.payload["receipt_id"] == receipt.receipt_id.as_str());
    c.w.clock.advance_secs(61);
    let sth = c.w.client.sth().map_err(err)?;
    let jwks = c.w.client.jwks().map_err(err)?;
    let proof: InclusionProof = c.w.client.get(&format!("/v1/proof?leaf_index={}&tree_size={}", entry.leaf_index, sth.tree_size)).map_err(err)?;
    let bytes = hex::decode(&entry.entry_hex).map_err(err)?;
    let included = verify_inclusion(&proof, &leaf_hash(&bytes), &sth, &jwks);
    c.say(
        "auditor",
        format!(
            "receipt leaf {} under tree_size {} root {}: {}",
            entry.leaf_index,
            sth.tree_size,
            digest_hex(&sth.root_hash),
            if included { "included" } else { "NOT included" }
        ),
    );
    c.check("receipt leaf included", included);
    let exit = c.audit_inclusion(&issued.txn_id);
    c.fact("auditor_exit", exit);
    c.check("auditor inclusion exit 0", exit == 0);
    Ok(Outcome { detected: false, observed: format!("receipt accepted {accepted}, included {included}, auditor exit {exit}") })
}

fn replay_single_use(c: &mut Ctx) -> Result<Outcome, String> {
    let (issued, _) = c.licensed_fetch("/articles/1", LicenseType::SingleUse)?;
    c.say("platform", "replays the same single_use token");
    let second = c.fetch("/articles/1", Some(&issued.token))?;
    Ok(c.denial(&second, "replayed"))
}

fn forged_token_signature(c: &mut Ctx) -> Result<Outcome, String> {
    let issued = c.license("/articles/1", LicenseType::SingleUse)?;
    let parsed = CompactJws::parse(&issued.token).map_err(err)?;
    let attacker = SigningKey::random(&mut ChaCha20Rng::seed_from_u64(c.w.seed ^ 0x666f_7267));
    let forged = jws::sign(&parsed.header, &parsed.payload, &attacker);
    c.say("attacker", "re-signed the genuine claims under the broker kid with a foreign key");
    let reply = c.fetch("/articles/1", Some(&forged))?;
    let outcome = c.denial(&reply, "bad_signature");
    let genuine = c.fetch("/articles/1", Some(&issued.token))?;
    c.check("genuine token still accepted", genuine.status == 200);
    Ok(outcome)
}

fn expired_token(c: &mut Ctx) -> Result<Outcome, String> {
    let issued = c.license("/articles/1", LicenseType::SingleUse)?;
    c.w.clock.advance_secs(301);
    c.say("platform", "presents the single_use token 301 s after issuance");
    let reply = c.fetch("/articles/1", Some(&issued.token))?;
    Ok(c.denial(&reply, "expired"))
}

fn wrong_audience(c: &mut Ctx) -> Result<Outcome, String> {
    let req = World::license_request("https://other-publisher.test/articles/1", "other-publisher.test", LicenseType::Session);
    let issued = c.w.client.issue_license(&req).map_err(err)?;
    c.say("broker", format!("issued session {} for other-publisher.test", issued.txn_id));
    c.say("platform", "presents it to publisher.test");
    let reply = c.fetch("/articles/1", Some(&issued.token))?;
    Ok(c.denial(&reply, "wrong_audience"))
}

fn resource_mismatch(c: &mut Ctx) -> Result<Outcome, String> {
    let issued = c.license("/articles/1", LicenseType::Session)?;
    c.say("platform", "uses the /articles/1 token for /articles/2");
    let reply = c.fetch("/articles/2", Some(&issued.token))?;
    Ok(c.denial(&reply, "resource_mismatch"))
}

fn rejected_registration(c: &mut Ctx, profile: DeviceProfile, expected: &str) -> Result<Outcome, String> {
    let (device, reg) = c.device(profile)?;
    let code = match &reg {
        Ok(_) => "registered".to_string(),
        Err(e) => e.code().unwrap_or("transport").to_string(),
    };
    let status = match &reg {
        Err(ClientError::Api { status, .. }) => *status,
        _ => 0,
    };
    let absent = matches!(c.w.client.get::<Value>(&format!("/v1/devices/{}", device.device_id())), Err(ClientError::Api { status: 404, .. }));
    c.check("device not registered", absent);
    c.fact("rejection", &code);
    Ok(Outcome { detected: status == 422 && code == expected, observed: format!("HTTP {status} {code}") })
}

fn unlocked_bootloader(c: &mut Ctx) -> Result<Outcome, String> {
    let profile = DeviceProfile { boot_state: BootState::Unverified, ..DeviceProfile::default() };
    c.say("device", "attests with verified_boot_state UNVERIFIED");
    rejected_registration(c, profile, "unlocked_bootloader")
}

fn software_attestation(c: &mut Ctx) -> Result<Outcome, String> {
    let profile = DeviceProfile { security_level: SecurityLevel::Software, ..DeviceProfile::default() };
    c.say("device", "attests with security_level SOFTWARE");
    rejected_registration(c, profile, "software_level")
}

fn rejection_of(results: &[ReceiptItemResult]) -> Option<&'static str> {
    match results {
        [ReceiptItemResult::Rejected { reason }] => Some(reason.code()),
        _ => None,
    }
}

fn duplicate_receipt(c: &mut Ctx) -> Result<Outcome, String> {
    let mut device = c.registered_device()?;
    let (issued, reply) = c.licensed_fetch("/articles/3", LicenseType::SingleUse)?;
    let (receipt, jws) = device.make_receipt(&Ctx::receipt_request(&issued.txn_id, &reply.body));
    let first = c.submit(std::slice::from_ref(&jws))?;
    c.check("first submission accepted", matches!(first.as_slice(), [ReceiptItemResult::Accepted { .. }]));
    c.say("device", format!("resubmits {}", receipt.receipt_id));
    let second = c.submit(std::slice::from_ref(&jws))?;
    let count = c
        .entries(&issued.txn_id)?
        .iter()
        .filter(|(e, d)| e.entry_type == EntryType::ReceiptAccepted && d.payload["receipt_id"] == receipt.receipt_id.as_str())
        .count();
    c.fact("receipt_accepted_entries", count);
    c.check("exactly one receipt_accepted entry", count == 1);
    let code = rejection_of(&second).unwrap_or("accepted");
    Ok(Outcome { detected: code == "duplicate_receipt", observed: format!("second submission {code}, {count} ledger entry") })
}

fn stale_receipt_8d(c: &mut Ctx) -> Result<Outcome, String> {
    let mut device = c.registered_device()?;
    let (issued, reply) = c.licensed_fetch("/articles/4", LicenseType::SingleUse)?;
    let (receipt, jws) = device.make_receipt(&Ctx::receipt_request(&issued.txn_id, &reply.body));
    c.say("device", format!("signed {} then stayed offline", receipt.receipt_id));
    c.w.clock.advance_secs(8 * 86_400);
    let results = c.submit(&[jws])?;
    let code = rejection_of(&results).unwrap_or("accepted");
    Ok(Outcome { detected: code == "stale_receipt", observed: format!("submitted after 8 days: {code}") })
}

fn content_hash_mismatch(c: &mut Ctx) -> Result<Outcome, String> {
    c.register_platform()?;
    c.w.publisher.serve_divergent_spot_checks(true);
    c.say("publisher", "serves altered bytes to broker re-fetches");
    let mut verdicts = Vec::new();
    let mut escalated_at = None;
    for i in 1..=3u32 {
        let path = format!("/articles/{}", i + 4);
        let (issued, reply) = c.licensed_fetch(&path, LicenseType::Session)?;
        c.record(&issued.txn_id, &fingerprint(&reply.body), &[ProvenanceEventType::ContentFetched])?;
        let results = c.w.client.run_spot_checks().map_err(err)?;
        for r in &results {
            c.say("broker", format!("spot-check {}: {:?}", r.txn_id, r.verdict));
            verdicts.push(r.verdict);
        }
        let health = c.w.client.publisher_health().map_err(err)?;
        let h = health.into_iter().find(|h| h.publisher_domain == PUBLISHER_DOMAIN).unwrap_or_default();
        c.say("broker", format!("publisher health: streak {} escalated {}", h.consecutive_mismatches, h.escalated));
        if h.escalated && escalated_at.is_none() {
            escalated_at = Some(i);
        }
    }
    c.fact("verdicts", &verdicts);
    c.fact("escalated_after", escalated_at);
    let all_mismatch = verdicts.len() == 3 && verdicts.iter().all(|v| *v == Verdict::Mismatch);
    Ok(Outcome {
        detected: all_mismatch && escalated_at == Some(3),
        observed: format!("verdicts {verdicts:?}, escalated after {}", escalated_at.map(|n| n.to_string()).unwrap_or_else(|| "never".into())),
    })
}

fn provenance_out_of_order(c: &mut Ctx) -> Result<Outcome, String> {
    c.register_platform()?;
    let (issued, reply) = c.licensed_fetch("/articles/1", LicenseType::Session)?;
    use ProvenanceEventType::*;
    c.record(&issued.txn_id, &fingerprint(&reply.body), &[ContentCited, ContentFetched, ContentChunked, ChunkEmbedded, ChunkRetrieved])?;
    let chain = c.chain(&issued.txn_id)?;
    Ok(Outcome { detected: !chain.order_valid, observed: format!("order_valid {}", chain.order_valid) })
}

fn backdated_provenance_timestamp(c: &mut Ctx) -> Result<Outcome, String> {
    c.register_platform()?;
    let (issued, reply) = c.licensed_fetch("/articles/1", LicenseType::Session)?;
    let fp = fingerprint(&reply.body);
    let event = c.w.sign_event(&issued.txn_id, ProvenanceEventType::ContentFetched, &fp, c.w.now() - 3_600);
    let ack = c.w.client.provenance(&event).map_err(err)?;
    c.say("platform", format!("recorded content_fetched claiming a timestamp 3600 s in the past (leaf {})", ack.leaf_index));
    c.check("ack reports skew", ack.skew_seconds == Some(3_600));
    use ProvenanceEventType::*;
    c.record(&issued.txn_id, &fp, &[ContentChunked, ChunkEmbedded, ChunkRetrieved, ContentCited])?;
    let chain = c.chain(&issued.txn_id)?;
    let flagged: Vec<String> = chain.timestamp_flags.iter().map(|f| format!("{}:{}", f.event_type, f.skew_seconds)).collect();
    c.fact("flags", &flagged);
    Ok(Outcome {
        detected: chain.timestamp_flags.len() == 1 && chain.timestamp_flags[0].event_type == "content_fetched",
        observed: format!("timestamp flags [{}]", flagged.join(", ")),
    })
}

/// Byte length of the first `keep` records of a record log.
fn record_prefix_len(bytes: &[u8], keep: usize) -> Option<usize> {
    if !bytes.starts_with(MAGIC) {
        return None;
    }
    let mut off = MAGIC.len() + 1;
    for _ in 0..keep {
        let len = u32::from_le_bytes(bytes.get(off..off + 4)?.try_into().ok()?) as usize;
        off += 4 + len + 4;
    }
    (off <= bytes.len()).then_some(off)
}

fn ledger_rollback_detected_by_auditor(c: &mut Ctx) -> Result<Outcome, String> {
    let tmp = c.tmp.as_ref().ok_or("no scratch directory")?.path().to_path_buf();
    for i in 1..=6 {
        c.license(&format!("/articles/{i}"), LicenseType::Session)?;
    }
    c.w.clock.advance_secs(61);
    let audit_dir = tmp.join("auditor");
    let seen = c.w.auditor(AuditorState::open(&audit_dir).map_err(err)?).cmd_sth();
    c.say("auditor", seen.lines.join("; "));
    c.check("auditor stored the head", seen.code() == 0);

    let ledger_path = tmp.join("broker").join("ledger.aegl");
    let mut truncation = Err("ledger not truncated".to_string());
    c.w.restart_broker(|| {
        truncation = std::fs::read(&ledger_path).map_err(err).and_then(|b| {
            let cut = record_prefix_len(&b, 3).ok_or("ledger shorter than 3 records")?;
            std::fs::write(&ledger_path, &b[..cut]).map_err(err)
        });
    })?;
    truncation?;
    c.say("operator", "truncated the ledger to its first 3 leaves and restarted the broker");
    c.w.clock.advance_secs(61);

    let report = c.w.auditor(AuditorState::open(&audit_dir).map_err(err)?).cmd_consistency(None, None);
    let line = report.lines.join("; ");
    c.say("auditor", format!("consistency: {line} (exit {})", report.code()));
    c.fact("auditor_exit", report.code());
    Ok(Outcome { detected: report.code() == 1 && line.starts_with("ROLLBACK"), observed: format!("exit {}: {line}", report.code()) })
}

fn parallel_pipeline(c: &mut Ctx) -> Result<Outcome, String> {
    c.register_platform()?;
    let (issued, reply) = c.licensed_fetch("/articles/3", LicenseType::Session)?;
    let fp = fingerprint(&reply.body);
    c.record(&issued.txn_id, &fp, ProvenanceEventType::ALL)?;
    let shadow_corpus = [reply.body.clone()];
    c.say("platform", format!("copied {} bytes into a training corpus outside the SDK; no protocol message is sent", shadow_corpus[0].len()));

    let chain = c.chain(&issued.txn_id)?;
    let spot = c.w.client.run_spot_checks().map_err(err)?;
    for r in &spot {
        c.say("broker", format!("spot-check {}: {:?}", r.txn_id, r.verdict));
    }
    let health = c.w.client.publisher_health().map_err(err)?;
    c.w.clock.advance_secs(61);
    let exit = c.audit_inclusion(&issued.txn_id);
    let alerts = alerts(&chain, &spot, &health, exit);
    c.fact("alerts", &alerts);
    c.check("spot-check ran", !spot.is_empty());
    Ok(Outcome { detected: !alerts.is_empty(), observed: if alerts.is_empty() { "no alert".into() } else { alerts.join(", ") } })
}

fn omitted_provenance_events(c: &mut Ctx) -> Result<Outcome, String> {
    c.register_platform()?;
    let (issued, reply) = c.licensed_fetch("/articles/6", LicenseType::Session)?;
    let fp = fingerprint(&reply.body);
    c.say("platform", "chunks, embeds and retrieves locally without recording those stages");
    c.record(&issued.txn_id, &fp, &[ProvenanceEventType::ContentFetched, ProvenanceEventType::ContentCited])?;
    let chain = c.chain(&issued.txn_id)?;
    c.check("middle stages absent", chain.events_present.values().filter(|n| **n == 0).count() == 3);
    c.w.clock.advance_secs(61);
    let exit = c.audit_inclusion(&issued.txn_id);
    let alerts = alerts(&chain, &[], &[], exit);
    c.fact("alerts", &alerts);
    Ok(Outcome { detected: !alerts.is_empty(), observed: if alerts.is_empty() { "no alert".into() } else { alerts.join(", ") } })
}

/// Every signal the protocol could raise about one transaction.
fn alerts(
    chain: &ChainStatus,
    spot: &[aegon_core::spotcheck::SpotCheckResult],
    health: &[aegon_core::spotcheck::PublisherHealth],
    auditor_exit: i32,
) -> Vec<String> {
    let mut out = Vec::new();
    if !chain.order_valid {
        out.push("chain order invalid".into());
    }
    if !chain.first_event_is_fetch {
        out.push("chain does not start with fetch".into());
    }
    if !chain.timestamp_flags.is_empty() {
        out.push("timestamp skew".into());
    }
    if chain.fetch_hash_matches_publisher == HashMatch::Mismatch {
        out.push("fetch hash differs from publisher".into());
    }
    if spot.iter().any(|r| r.verdict != Verdict::Verified) {
        out.push("spot-check not verified".into());
    }
    if health.iter().any(|h| h.escalated) {
        out.push("publisher escalated".into());
    }
    if auditor_exit != 0 {
        out.push(format!("auditor exit {auditor_exit}"));
    }
    out
}
