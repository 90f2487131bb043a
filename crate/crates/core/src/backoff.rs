//! Exponential retry schedule: `min(max, base * 2^(n-1))` before attempt `n`
//! (n counted from 1 for the first retry), stretched by a uniform factor in
//! `[1, 1 + jitter)`.

use std::time::Duration;

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub max: Duration,
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), max: Duration::from_secs(60), jitter: 0.5 }
    }
}

impl Backoff {
    /// Delay before retry `attempt` without jitter.
    pub fn base_delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(32);
        self.base.saturating_mul(1u32 << exp.min(31)).min(self.max)
    }

    pub fn delay<R: Rng + ?Sized>(&self, attempt: u32, rng: &mut R) -> Duration {
        let d = self.base_delay(attempt);
        if self.jitter <= 0.0 {
            return d;
        }
        d.mul_f64(1.0 + rng.gen_range(0.0..self.jitter))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule() {
        let b = Backoff::default();
        let secs: Vec<u64> = (1..=8).map(|n| b.base_delay(n).as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4, 8, 16, 32, 60, 60]);
        assert_eq!(b.base_delay(100).as_secs(), 60);
    }

    #[test]
    fn jitter_bounds() {
        let b = Backoff::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=12 {
            for _ in 0..200 {
                let d = b.delay(n, &mut rng);
                let base = b.base_delay(n);
                assert!(d >= base && d < base.mul_f64(1.5), "{n}: {d:?}");
            }
        }
    }
}
