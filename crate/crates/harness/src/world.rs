//! A broker, toy publisher, platform and trust root wired together over
//! loopback HTTP and driven by one manual clock.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use aegon_audit::{Auditor, AuditorState, HttpTransport};
use aegon_broker::client::{BrokerClient, ClientError};
use aegon_broker::fetch::HttpFetcher;
use aegon_broker::http::{router, BackgroundServer};
use aegon_broker::service::IssueResponse;
use aegon_broker::{Broker, BrokerConfig};
use aegon_core::attestation::{decode_challenge, DeviceRecord, TrustAnchor};
use aegon_core::clock::{Clock, ManualClock};
use aegon_core::device::{DeviceProfile, SimDevice};
use aegon_core::keys::Jwk;
use aegon_core::provenance::{EventBody, ProvenanceEventType, RecordAck, SignedEvent};
use aegon_core::spotcheck::{ContentFetcher, DEFAULT_RATE};
use aegon_core::token::{LicenseRequest, LicenseType, Scope};
use p256::ecdsa::SigningKey;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::publisher::{ToyPublisher, PUBLISHER_DOMAIN, PUBLISHER_ORIGIN};

pub const T0: i64 = 1_790_000_000;
pub const PLATFORM_ID: &str = "answers-ai";
pub const ROOT_ID: &str = "aegon-test-root";

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub seed: u64,
    pub spot_check_rate: f64,
    /// Persist broker state here; required for restarts.
    pub data_dir: Option<PathBuf>,
}

impl WorldConfig {
    pub fn new(seed: u64) -> Self {
        Self { seed, spot_check_rate: DEFAULT_RATE, data_dir: None }
    }
}

/// Spot-check fetcher whose target is known only once the publisher is up.
#[derive(Debug, Default)]
struct LateFetcher(OnceLock<HttpFetcher>);

impl ContentFetcher for LateFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, String> {
        self.0.get().ok_or("publisher not started")?.fetch(url)
    }
}

/// What the platform got back from the publisher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublisherReply {
    pub status: u16,
    pub txn_header: Option<String>,
    pub body: Vec<u8>,
    pub error_code: Option<String>,
}

pub struct World {
    pub seed: u64,
    pub clock: Arc<ManualClock>,
    pub broker: Arc<Broker>,
    pub client: BrokerClient,
    pub publisher: ToyPublisher,
    pub anchor: TrustAnchor,
    pub platform_key: SigningKey,
    server: BackgroundServer,
    config: BrokerConfig,
    fetcher: Arc<LateFetcher>,
    agent: ureq::Agent,
    devices: u64,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World").field("seed", &self.seed).field("broker", &self.broker).finish()
    }
}

impl World {
    pub fn start(cfg: WorldConfig) -> Result<Self, String> {
        let seed = cfg.seed;
        let clock = Arc::new(ManualClock::new(T0));
        let anchor = TrustAnchor::generate(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x726f_6f74), ROOT_ID, T0 - 86_400);
        let platform_key = SigningKey::random(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x706c_6174));
        let config = BrokerConfig {
            data_dir: cfg.data_dir,
            spot_check_rate: cfg.spot_check_rate,
            trust_roots: vec![anchor.public_jwk()],
            seed: Some(seed),
            ..BrokerConfig::default()
        };
        let fetcher = Arc::new(LateFetcher::default());
        let broker = Arc::new(Broker::open(config.clone(), clock.clone(), fetcher.clone()).map_err(|e| e.to_string())?);
        let server = BackgroundServer::start(router(broker.clone()), None).map_err(|e| e.to_string())?;
        let publisher = ToyPublisher::start(&server.url(), clock.clone(), seed ^ 0x7075_6273).map_err(|e| e.to_string())?;
        let _ = fetcher.0.set(HttpFetcher::new(vec![(PUBLISHER_ORIGIN.into(), publisher.url())]));
        Ok(Self {
            seed,
            client: BrokerClient::new(&server.url()),
            clock,
            broker,
            publisher,
            anchor,
            platform_key,
            server,
            config,
            fetcher,
            agent: ureq::AgentBuilder::new().build(),
            devices: 0,
        })
    }

    pub fn broker_url(&self) -> String {
        self.server.url()
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    /// Stops the broker and reopens it from its data directory on a fresh
    /// port. The publisher keeps its cached keys but loses its broker link.
    pub fn restart_broker(&mut self, between: impl FnOnce()) -> Result<(), String> {
        if self.config.data_dir.is_none() {
            return Err("restart needs a data directory".into());
        }
        self.server.stop();
        between();
        let broker = Arc::new(Broker::open(self.config.clone(), self.clock.clone(), self.fetcher.clone()).map_err(|e| e.to_string())?);
        self.server = BackgroundServer::start(router(broker.clone()), None).map_err(|e| e.to_string())?;
        self.broker = broker;
        self.client = BrokerClient::new(&self.server.url());
        Ok(())
    }

    pub fn register_platform(&self) -> Result<(), ClientError> {
        self.client.register_platform(PLATFORM_ID, &Jwk::from_key(self.platform_key.verifying_key())).map(|_| ())
    }

    pub fn license_request(url: &str, domain: &str, license_type: LicenseType) -> LicenseRequest {
        LicenseRequest {
            platform_id: PLATFORM_ID.into(),
            publisher_domain: domain.into(),
            resource_url: url.into(),
            scope: Scope::FullArticleHtml,
            license_type,
            training_allowed: false,
            attribution_required: true,
            provenance_required: true,
        }
    }

    /// Licenses `path` on the toy publisher.
    pub fn license(&self, path: &str, license_type: LicenseType) -> Result<IssueResponse, ClientError> {
        self.client.issue_license(&Self::license_request(&format!("{PUBLISHER_ORIGIN}{path}"), PUBLISHER_DOMAIN, license_type))
    }

    /// Platform GET of `path` on the publisher, with an optional bearer token.
    pub fn fetch(&self, path: &str, token: Option<&str>) -> Result<PublisherReply, String> {
        let mut req = self.agent.get(&format!("{}{path}", self.publisher.url()));
        if let Some(t) = token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let resp = match req.call() {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(e.to_string()),
        };
        let status = resp.status();
        let txn_header = resp.header(aegon_core::edge::TXN_HEADER).map(str::to_string);
        let mut body = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader(), &mut body).map_err(|e| e.to_string())?;
        let error_code = if status == 200 {
            None
        } else {
            serde_json::from_slice::<serde_json::Value>(&body).ok().and_then(|v| v["error_code"].as_str().map(str::to_string))
        };
        Ok(PublisherReply { status, txn_header, body, error_code })
    }

    pub fn sign_event(&self, txn_id: &str, kind: ProvenanceEventType, fingerprint: &str, client_timestamp: i64) -> SignedEvent {
        SignedEvent::sign(
            EventBody {
                txn_id: txn_id.into(),
                event_type: kind.as_str().into(),
                content_fingerprint: fingerprint.into(),
                stage_detail: None,
                client_timestamp,
            },
            &self.platform_key,
            PLATFORM_ID,
        )
    }

    /// Records `kinds` in the given order, one second apart, with honest
    /// client timestamps.
    pub fn record_events(&self, txn_id: &str, fingerprint: &str, kinds: &[ProvenanceEventType]) -> Result<Vec<RecordAck>, ClientError> {
        kinds
            .iter()
            .map(|k| {
                self.clock.advance_secs(1);
                self.client.provenance(&self.sign_event(txn_id, *k, fingerprint, self.now()))
            })
            .collect()
    }

    /// Requests a challenge, provisions a simulated device against the test
    /// root and tries to register it.
    pub fn provision_device(&mut self, profile: DeviceProfile) -> Result<(SimDevice, Result<DeviceRecord, ClientError>), ClientError> {
        let challenge = self.client.challenge()?;
        let bytes = decode_challenge(&challenge.challenge).unwrap_or_default();
        self.devices += 1;
        let device = SimDevice::provision(&bytes, profile, &self.anchor, self.clock.clone(), self.seed.wrapping_mul(1_000).wrapping_add(self.devices));
        let registered = self.client.register_device(device.chain(), &challenge.challenge);
        Ok((device, registered))
    }

    pub fn auditor(&self, state: AuditorState) -> Auditor<HttpTransport> {
        Auditor::new(HttpTransport::new(&self.broker_url()), state)
    }
}
