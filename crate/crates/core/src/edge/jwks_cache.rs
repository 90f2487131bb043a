use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::keys::Jwks;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("jwks fetch failed: {0}")]
pub struct FetchError(pub String);

/// Source of the broker's JWKS document (an HTTP GET in deployment).
pub trait JwksFetcher: Send + Sync {
    fn fetch(&self) -> Result<Jwks, FetchError>;
}

#[derive(Debug, Clone, Copy)]
pub struct JwksCachePolicy {
    pub ttl: i64,
    /// Oldest copy usable while the broker is unreachable.
    pub stale_cap: i64,
    /// After a failed fetch, serve stale keys for this long before retrying.
    pub failure_backoff: i64,
    /// Minimum age before an unknown `kid` may force a refetch.
    pub min_refetch: i64,
}

impl Default for JwksCachePolicy {
    fn default() -> Self {
        Self { ttl: 300, stale_cap: 86_400, failure_backoff: 30, min_refetch: 60 }
    }
}

#[derive(Debug, Clone)]
pub struct CachedJwks {
    pub document: Arc<Jwks>,
    pub fetched_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("jwks_unavailable")]
pub struct JwksUnavailable;

/// TTL cache with single-flight refresh and stale-if-error fallback.
pub struct JwksCache {
    fetcher: Arc<dyn JwksFetcher>,
    policy: JwksCachePolicy,
    cached: RwLock<Option<CachedJwks>>,
    // Held for the duration of a fetch; value is the time of the last failure.
    refresh: Mutex<Option<i64>>,
}

impl JwksCache {
    pub fn new(fetcher: Arc<dyn JwksFetcher>, policy: JwksCachePolicy) -> Self {
        Self { fetcher, policy, cached: RwLock::new(None), refresh: Mutex::new(None) }
    }

    pub fn snapshot(&self) -> Option<CachedJwks> {
        self.cached.read().clone()
    }

    fn fresh(&self, now: i64) -> Option<Arc<Jwks>> {
        self.cached.read().as_ref().filter(|c| now - c.fetched_at < self.policy.ttl).map(|c| c.document.clone())
    }

    fn usable_stale(&self, now: i64) -> Option<Arc<Jwks>> {
        self.cached.read().as_ref().filter(|c| now - c.fetched_at <= self.policy.stale_cap).map(|c| c.document.clone())
    }

    /// Keys to validate with at `now`, refreshing if the copy is past its TTL.
    pub fn get(&self, now: i64) -> Result<Arc<Jwks>, JwksUnavailable> {
        if let Some(doc) = self.fresh(now) {
            return Ok(doc);
        }
        self.refresh(now, false)
    }

    /// Refetch when the cached copy is at least `min_refetch` old; used when a
    /// token names a `kid` the cache does not know.
    pub fn refresh_for_unknown_kid(&self, now: i64) -> Option<Arc<Jwks>> {
        let old_enough = self.cached.read().as_ref().is_none_or(|c| now - c.fetched_at >= self.policy.min_refetch);
        if !old_enough {
            return None;
        }
        self.refresh(now, true).ok()
    }

    fn refresh(&self, now: i64, force: bool) -> Result<Arc<Jwks>, JwksUnavailable> {
        let mut last_failure = self.refresh.lock();
        // Another caller may have refreshed while we waited.
        if !force {
            if let Some(doc) = self.fresh(now) {
                return Ok(doc);
            }
        }
        if last_failure.is_some_and(|t| now - t < self.policy.failure_backoff) {
            return self.usable_stale(now).ok_or(JwksUnavailable);
        }
        match self.fetcher.fetch() {
            Ok(doc) => {
                let doc = Arc::new(doc);
                *self.cached.write() = Some(CachedJwks { document: doc.clone(), fetched_at: now });
                *last_failure = None;
                Ok(doc)
            }
            Err(_) => {
                *last_failure = Some(now);
                self.usable_stale(now).ok_or(JwksUnavailable)
            }
        }
    }
}
