//! Spot-check content fetcher.

use std::io::Read;
use std::time::Duration;

use aegon_core::spotcheck::{ContentFetcher, SPOT_CHECK_HEADER};

const MAX_BODY: u64 = 16 << 20;

/// Fetches licensed URLs over HTTP. `origins` maps a licensed origin such as
/// `https://publisher.test` onto the address actually reachable, e.g. a
/// loopback server.
#[derive(Debug, Clone)]
pub struct HttpFetcher {
    agent: ureq::Agent,
    origins: Vec<(String, String)>,
}

impl HttpFetcher {
    pub fn new(origins: Vec<(String, String)>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(10)).build();
        Self { agent, origins }
    }

    pub fn resolve(&self, url: &str) -> String {
        for (from, to) in &self.origins {
            if let Some(rest) = url.strip_prefix(from.as_str()) {
                if rest.is_empty() || rest.starts_with('/') || rest.starts_with('?') {
                    return format!("{}{}", to.trim_end_matches('/'), rest);
                }
            }
        }
        url.to_string()
    }
}

impl ContentFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, String> {
        let resp = self.agent.get(&self.resolve(url)).set(SPOT_CHECK_HEADER, "1").call().map_err(|e| e.to_string())?;
        let mut body = Vec::new();
        resp.into_reader().take(MAX_BODY).read_to_end(&mut body).map_err(|e| e.to_string())?;
        Ok(body)
    }
}

/// Fetcher for brokers with spot-checks disabled.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFetch;

impl ContentFetcher for NoFetch {
    fn fetch(&self, _url: &str) -> Result<Vec<u8>, String> {
        Err("content fetching disabled".into())
    }
}
