//! Latency benchmark of the protocol operations.
//!
//! The broker runs in-process behind loopback HTTP with a file-backed,
//! fsynced ledger and the system clock. Edge validation, receipt signing
//! and chain verification are measured in-process because that is where
//! they run. Paced cells are open loop: latency is measured from each
//! request's scheduled send time, so queueing behind a slow request counts.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use aegon_broker::client::BrokerClient;
use aegon_broker::fetch::NoFetch;
use aegon_broker::http::{router, BackgroundServer};
use aegon_broker::{Broker, BrokerConfig};
use aegon_core::attestation::{verify_chain, TrustAnchor};
use aegon_core::clock::{Clock, SystemClock};
use aegon_core::device::{DeviceProfile, ReceiptRequest, SimDevice};
use aegon_core::edge::{EdgeConfig, EdgeValidator};
use aegon_core::keys::Jwk;
use aegon_core::ledger::{EntryType, Ledger, NewEntry};
use aegon_core::provenance::{fingerprint, EventBody, ProvenanceEventType, SignedEvent};
use aegon_core::token::LicenseType;
use p256::ecdsa::SigningKey;
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use crate::publisher::{PUBLISHER_DOMAIN, PUBLISHER_ORIGIN};
use crate::world::{World, PLATFORM_ID};

pub const VALIDATION_P95_MS: f64 = 10.0;
pub const ISSUANCE_P95_MS: f64 = 50.0;
pub const PROVENANCE_P95_MS: f64 = 5.0;
pub const CHAIN_VERIFY_P95_MS: f64 = 20.0;
pub const RECEIPT_MAX_BYTES: usize = 4096;
pub const MIN_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Quick,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quick" => Ok(Self::Quick),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown profile {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub operation: String,
    /// Requested rate for paced cells; `None` for back-to-back measurement.
    pub target_rate: Option<f64>,
    pub achieved_rate: f64,
    pub samples: usize,
    pub errors: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub target_p95_ms: Option<f64>,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppendRate {
    pub fsync: bool,
    pub appends: usize,
    pub per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub profile: Profile,
    pub methodology: String,
    pub cells: Vec<Cell>,
    pub receipt_jws_max_bytes: usize,
    pub receipt_limit_bytes: usize,
    pub ledger_append: Vec<AppendRate>,
    pub passed: bool,
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn cell(operation: &str, mut ms: Vec<f64>, errors: usize, target_rate: Option<f64>, achieved_rate: f64, target_p95_ms: Option<f64>) -> Cell {
    ms.sort_by(f64::total_cmp);
    let p95 = percentile(&ms, 95.0);
    Cell {
        operation: operation.into(),
        target_rate,
        achieved_rate,
        samples: ms.len(),
        errors,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: p95,
        p99_ms: percentile(&ms, 99.0),
        mean_ms: ms.iter().sum::<f64>() / ms.len().max(1) as f64,
        target_p95_ms,
        pass: target_p95_ms.map(|t| errors == 0 && ms.len() >= MIN_SAMPLES && p95 < t),
    }
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Times `op` back to back, `samples` times after `warmup` untimed runs.
fn timed<F: FnMut(usize) -> bool>(warmup: usize, samples: usize, mut op: F) -> (Vec<f64>, usize, f64) {
    for i in 0..warmup {
        op(i);
    }
    let mut ms = Vec::with_capacity(samples);
    let mut errors = 0;
    let start = Instant::now();
    for i in warmup..warmup + samples {
        let t = Instant::now();
        if !op(i) {
            errors += 1;
        }
        ms.push(elapsed_ms(t));
    }
    let rate = samples as f64 / start.elapsed().as_secs_f64();
    (ms, errors, rate)
}

/// Open-loop load: request `i` is due at `start + i / rate`.
fn paced<F: Fn(usize) -> bool + Sync>(rate: f64, samples: usize, op: F) -> (Vec<f64>, usize, f64) {
    let workers = ((rate / 25.0).ceil() as usize).clamp(4, 64);
    let next = AtomicUsize::new(0);
    let out = Mutex::new(Vec::with_capacity(samples));
    let errors = AtomicUsize::new(0);
    let start = Instant::now() + Duration::from_millis(20);
    let last = Mutex::new(start);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= samples {
                    break;
                }
                let due = start + Duration::from_secs_f64(i as f64 / rate);
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
                if !op(i) {
                    errors.fetch_add(1, Ordering::Relaxed);
                }
                let done = Instant::now();
                out.lock().push((done - due).as_secs_f64() * 1e3);
                let mut l = last.lock();
                if done > *l {
                    *l = done;
                }
            });
        }
    });
    let span = (*last.lock() - start).as_secs_f64();
    (out.into_inner(), errors.into_inner(), samples as f64 / span.max(1e-9))
}

/// A benchmark broker on loopback, with its platform registered.
pub struct BenchEnv {
    pub broker: Arc<Broker>,
    pub client: Arc<BrokerClient>,
    pub platform_key: SigningKey,
    server: BackgroundServer,
    _dir: tempfile::TempDir,
}

impl BenchEnv {
    pub fn start(seed: u64) -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = BrokerConfig { data_dir: Some(dir.path().to_path_buf()), seed: Some(seed), fsync: true, ..BrokerConfig::default() };
        let broker = Arc::new(Broker::open(config, Arc::new(SystemClock), Arc::new(NoFetch)).map_err(|e| e.to_string())?);
        let server = BackgroundServer::start(router(broker.clone()), None).map_err(|e| e.to_string())?;
        let client = Arc::new(BrokerClient::new(&server.url()));
        let platform_key = SigningKey::random(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x706c_6174));
        client.register_platform(PLATFORM_ID, &Jwk::from_key(platform_key.verifying_key())).map_err(|e| e.to_string())?;
        Ok(Self { broker, client, platform_key, server, _dir: dir })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }
}

fn article_url(i: usize) -> String {
    format!("{PUBLISHER_ORIGIN}/articles/{}", i % 8 + 1)
}

/// Edge validation of distinct single-use tokens against a warm JWKS cache.
pub fn bench_validation(env: &BenchEnv, samples: usize) -> Cell {
    let warmup = 100;
    let now = SystemClock.now();
    let tokens: Vec<(String, String)> = (0..warmup + samples)
        .filter_map(|i| {
            let url = article_url(i);
            let req = World::license_request(&url, PUBLISHER_DOMAIN, LicenseType::SingleUse);
            env.broker.issue_license(&req).ok().map(|t| (t.token, url))
        })
        .collect();
    let validator = EdgeValidator::new(env.client.clone(), EdgeConfig::default(), now);
    let _ = validator.refresh_jwks(now);
    let calls = env.client.request_count();
    let (ms, mut errors, rate) = timed(warmup, samples.min(tokens.len().saturating_sub(warmup)), |i| {
        let (token, url) = &tokens[i];
        validator.gate_request(Some(&format!("Bearer {token}")), url, PUBLISHER_DOMAIN, SystemClock.now()).is_allow()
    });
    if env.client.request_count() != calls {
        errors += 1;
    }
    cell("token_validation_warm_jwks", ms, errors, None, rate, Some(VALIDATION_P95_MS))
}

/// `POST /v1/licenses` at a fixed request rate.
pub fn bench_issuance(env: &BenchEnv, rate: f64, samples: usize) -> Cell {
    for i in 0..20 {
        let _ = env.client.issue_license(&World::license_request(&article_url(i), PUBLISHER_DOMAIN, LicenseType::Session));
    }
    let (ms, errors, achieved) =
        paced(rate, samples, |i| env.client.issue_license(&World::license_request(&article_url(i), PUBLISHER_DOMAIN, LicenseType::Session)).is_ok());
    let target = (rate <= 100.0).then_some(ISSUANCE_P95_MS);
    cell(&format!("token_issuance@{rate}rps"), ms, errors, Some(rate), achieved, target)
}

/// Platform-side cost of recording one provenance event: signing plus the
/// `POST /v1/provenance` round trip.
pub fn bench_provenance(env: &BenchEnv, samples: usize) -> Cell {
    let warmup = 50;
    let per_txn = ProvenanceEventType::ALL.len();
    let txns: Vec<String> = (0..(warmup + samples).div_ceil(per_txn))
        .filter_map(|i| {
            let req = World::license_request(&article_url(i), PUBLISHER_DOMAIN, LicenseType::Session);
            env.broker.issue_license(&req).ok().map(|t| t.txn_id)
        })
        .collect();
    let fp = fingerprint(b"benchmark article body");
    let (ms, errors, rate) = timed(warmup, samples, |i| {
        let Some(txn) = txns.get(i / per_txn) else { return false };
        let event = SignedEvent::sign(
            EventBody {
                txn_id: txn.clone(),
                event_type: ProvenanceEventType::ALL[i % per_txn].as_str().into(),
                content_fingerprint: fp.clone(),
                stage_detail: None,
                client_timestamp: SystemClock.now(),
            },
            &env.platform_key,
            PLATFORM_ID,
        );
        env.client.provenance(&event).is_ok()
    });
    cell("provenance_record", ms, errors, None, rate, Some(PROVENANCE_P95_MS))
}

fn bench_device(seed: u64) -> (TrustAnchor, Vec<u8>, SimDevice) {
    let now = SystemClock.now();
    let anchor = TrustAnchor::generate(&mut ChaCha20Rng::seed_from_u64(seed), "bench-root", now);
    let challenge = b"bench-challenge-0123456789abcdef".to_vec();
    let device = SimDevice::provision(&challenge, DeviceProfile::default(), &anchor, Arc::new(SystemClock), seed);
    (anchor, challenge, device)
}

/// Simulated-device receipt construction and signing; also returns the
/// largest JWS produced.
pub fn bench_receipt_signing(samples: usize, seed: u64) -> (Cell, usize) {
    let (_, _, mut device) = bench_device(seed);
    let content = vec![b'x'; 16 << 10];
    let mut max_len = 0;
    let (ms, errors, rate) = timed(20, samples, |i| {
        let req = ReceiptRequest {
            txn_id: format!("txn_{i:026}"),
            publisher_domain: PUBLISHER_DOMAIN.into(),
            content: content.clone(),
            license_type: LicenseType::TrainingCorpus,
            training_allowed: true,
            storage_policy: "retain_30d_encrypted_at_rest".into(),
        };
        let (_, jws) = device.make_receipt(&req);
        max_len = max_len.max(jws.len());
        jws.len() < RECEIPT_MAX_BYTES
    });
    (cell("receipt_signing", ms, errors, None, rate, None), max_len)
}

/// Attestation chain verification against the pinned root.
pub fn bench_chain_verification(samples: usize, seed: u64) -> Cell {
    let (anchor, challenge, device) = bench_device(seed);
    let roots = [*anchor.key.verifying_key()];
    let (ms, errors, rate) = timed(20, samples, |_| verify_chain(device.chain(), &roots, &challenge, SystemClock.now()).is_ok());
    cell("attestation_chain_verification", ms, errors, None, rate, Some(CHAIN_VERIFY_P95_MS))
}

/// Raw ledger appends per second.
pub fn bench_ledger_append(appends: usize, fsync: bool) -> AppendRate {
    let dir = tempfile::tempdir().expect("temp dir");
    let ledger = Ledger::open(dir.path().join("ledger.aegl"), fsync).expect("ledger opens");
    let start = Instant::now();
    for i in 0..appends {
        ledger
            .append(NewEntry { txn_id: format!("txn_{i:026}"), entry_type: EntryType::LicenseIssued, payload: json!({"n": i}), server_timestamp: 0 })
            .expect("append");
    }
    AppendRate { fsync, appends, per_second: appends as f64 / start.elapsed().as_secs_f64() }
}

pub const METHODOLOGY: &str = "broker in-process behind loopback HTTP with an fsynced file ledger; \
edge validation, receipt signing and chain verification measured in-process; \
paced cells are open loop with latency taken from the scheduled send time; \
percentiles are nearest-rank over at least 1000 samples per cell; \
rates the host cannot sustain are reported with the achieved rate instead of a verdict";

pub fn run_bench(profile: Profile) -> Result<BenchReport, String> {
    let env = BenchEnv::start(7)?;
    let (samples, rates): (usize, &[f64]) = match profile {
        Profile::Quick => (MIN_SAMPLES, &[100.0]),
        Profile::Full => (5 * MIN_SAMPLES, &[1.0, 10.0, 100.0, 1000.0]),
    };
    let mut cells = vec![bench_validation(&env, samples)];
    for rate in rates {
        let n = match profile {
            Profile::Quick => MIN_SAMPLES,
            Profile::Full => MIN_SAMPLES.max((*rate * 30.0) as usize),
        };
        cells.push(bench_issuance(&env, *rate, n));
    }
    cells.push(bench_provenance(&env, samples));
    let (signing, receipt_max) = bench_receipt_signing(samples, 11);
    cells.push(signing);
    cells.push(bench_chain_verification(samples, 13));
    let appends = match profile {
        Profile::Quick => 2_000,
        Profile::Full => 20_000,
    };
    let ledger_append = vec![bench_ledger_append(appends, false), bench_ledger_append(appends / 4, true)];
    let passed = receipt_max < RECEIPT_MAX_BYTES && cells.iter().all(|c| c.pass != Some(false));
    Ok(BenchReport {
        profile,
        methodology: METHODOLOGY.into(),
        cells,
        receipt_jws_max_bytes: receipt_max,
        receipt_limit_bytes: RECEIPT_MAX_BYTES,
        ledger_append,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&[3.0], 50.0), 3.0);
        assert!(percentile(&[], 50.0).is_nan());
    }

    #[test]
    fn pass_needs_enough_samples() {
        let c = cell("x", vec![1.0; 10], 0, None, 1.0, Some(5.0));
        assert_eq!(c.pass, Some(false));
        let c = cell("x", vec![1.0; MIN_SAMPLES], 0, None, 1.0, Some(5.0));
        assert_eq!(c.pass, Some(true));
    }
}
