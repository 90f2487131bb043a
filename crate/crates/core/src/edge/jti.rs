//! Single-use token registry.
//!
//! A two-generation Bloom filter answers "definitely unseen" for the common
//! case; every positive is confirmed against an exact map of `jti -> exp`, so
//! a filter false positive never denies a legitimate token.

use std::collections::HashMap;

use parking_lot::Mutex;

use super::bloom::BloomFilter;

#[derive(Debug, Clone, Copy)]
pub struct JtiConfig {
    pub capacity: usize,
    pub fpr: f64,
    /// Longest lifetime of a token that can reach the registry (seconds).
    pub horizon: i64,
    /// Clock-skew margin added before an entry is forgotten.
    pub skew: i64,
}

impl Default for JtiConfig {
    fn default() -> Self {
        Self { capacity: 100_000, fpr: 1e-4, horizon: 300, skew: 60 }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct JtiStats {
    pub inserted: u64,
    pub replays: u64,
    pub bloom_positives: u64,
    /// Filter positives the exact set showed to be unseen.
    pub false_positives: u64,
}

struct Inner {
    current: BloomFilter,
    previous: BloomFilter,
    rotated_at: i64,
    exact: HashMap<String, i64>,
    stats: JtiStats,
}

pub struct JtiRegistry {
    config: JtiConfig,
    inner: Mutex<Inner>,
}

impl JtiRegistry {
    pub fn new(config: JtiConfig, now: i64) -> Self {
        let bloom = BloomFilter::with_rate(config.capacity, config.fpr);
        Self {
            config,
            inner: Mutex::new(Inner { current: bloom.clone(), previous: bloom, rotated_at: now, exact: HashMap::new(), stats: JtiStats::default() }),
        }
    }

    fn window(&self) -> i64 {
        self.config.horizon + self.config.skew
    }

    /// Atomically checks `jti` and records it. Returns `true` if the token
    /// was unseen (and is now recorded), `false` for a replay.
    pub fn check_and_insert(&self, jti: &str, exp: i64, now: i64) -> bool {
        let mut inner = self.inner.lock();
        self.maybe_rotate(&mut inner, now);
        let key = jti.as_bytes();
        if inner.current.contains(key) || inner.previous.contains(key) {
            inner.stats.bloom_positives += 1;
            if inner.exact.get(jti).is_some_and(|e| now <= e + self.config.skew) {
                inner.stats.replays += 1;
                return false;
            }
            inner.stats.false_positives += 1;
        }
        inner.current.insert(key);
        inner.exact.insert(jti.to_string(), exp);
        inner.stats.inserted += 1;
        true
    }

    fn maybe_rotate(&self, inner: &mut Inner, now: i64) {
        if now - inner.rotated_at < self.window() {
            return;
        }
        let skew = self.config.skew;
        inner.exact.retain(|_, exp| now <= *exp + skew);
        let fresh = BloomFilter::with_rate(self.config.capacity, self.config.fpr);
        inner.previous = std::mem::replace(&mut inner.current, fresh);
        if now - inner.rotated_at >= 2 * self.window() {
            inner.previous.clear();
        }
        // Entries living longer than one window must stay visible to the
        // filter for as long as the exact set holds them.
        let Inner { current, exact, .. } = inner;
        for jti in exact.keys() {
            current.insert(jti.as_bytes());
        }
        inner.rotated_at = now;
    }

    pub fn stats(&self) -> JtiStats {
        self.inner.lock().stats
    }

    pub fn tracked(&self) -> usize {
        self.inner.lock().exact.len()
    }
}
