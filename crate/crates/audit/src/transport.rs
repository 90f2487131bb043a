//! How the auditor reaches a broker: live HTTP, or recorded fixtures.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fetched {
    pub status: u16,
    #[serde(with = "b64")]
    pub body: Vec<u8>,
}

mod b64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

pub trait Transport {
    /// GETs `path` (starting with `/`) relative to the broker base URL.
    fn get(&self, path: &str) -> Result<Fetched, TransportError>;
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base: &str) -> Self {
        Self { base: base.trim_end_matches('/').to_string(), agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(15)).build() }
    }
}

impl Transport for HttpTransport {
    fn get(&self, path: &str) -> Result<Fetched, TransportError> {
        let resp = match self.agent.get(&format!("{}{}", self.base, path)).call() {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(TransportError(e.to_string())),
        };
        let status = resp.status();
        let mut body = Vec::new();
        resp.into_reader().take(64 << 20).read_to_end(&mut body).map_err(|e| TransportError(e.to_string()))?;
        Ok(Fetched { status, body })
    }
}

/// Responses per path, consumed in order; the last one repeats.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Fixtures {
    pub responses: BTreeMap<String, Vec<Fetched>>,
}

#[derive(Debug, Default)]
pub struct FixtureTransport {
    fixtures: Fixtures,
    cursor: Mutex<BTreeMap<String, usize>>,
}

impl FixtureTransport {
    pub fn new(fixtures: Fixtures) -> Self {
        Self { fixtures, cursor: Mutex::new(BTreeMap::new()) }
    }

    pub fn load(path: &Path) -> Result<Self, TransportError> {
        let raw = std::fs::read(path).map_err(|e| TransportError(format!("{}: {e}", path.display())))?;
        let fixtures = serde_json::from_slice(&raw).map_err(|e| TransportError(format!("{}: {e}", path.display())))?;
        Ok(Self::new(fixtures))
    }
}

impl Transport for FixtureTransport {
    fn get(&self, path: &str) -> Result<Fetched, TransportError> {
        let list = self.fixtures.responses.get(path).filter(|l| !l.is_empty()).ok_or_else(|| TransportError(format!("no fixture for {path}")))?;
        let mut cursor = self.cursor.lock();
        let i = cursor.entry(path.to_string()).or_insert(0);
        let out = list[(*i).min(list.len() - 1)].clone();
        *i += 1;
        Ok(out)
    }
}

/// Wraps a transport and keeps every response for later replay.
pub struct RecordingTransport<T> {
    inner: T,
    recorded: Mutex<Fixtures>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, recorded: Mutex::new(Fixtures::default()) }
    }

    pub fn fixtures(&self) -> Fixtures {
        let r = self.recorded.lock();
        Fixtures { responses: r.responses.clone() }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.fixtures()).expect("fixtures serialize"))
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn get(&self, path: &str) -> Result<Fetched, TransportError> {
        let r = self.inner.get(path)?;
        self.recorded.lock().responses.entry(path.to_string()).or_default().push(r.clone());
        Ok(r)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn get(&self, path: &str) -> Result<Fetched, TransportError> {
        (**self).get(path)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn get(&self, path: &str) -> Result<Fetched, TransportError> {
        (**self).get(path)
    }
}
