use sha2::{Digest, Sha256};

/// Bloom filter with Kirsch-Mitzenmacher double hashing over SHA-256.
#[derive(Debug, Clone)]
pub struct BloomFilter {
    bits: Vec<u64>,
    num_bits: u64,
    num_hashes: u32,
}

impl BloomFilter {
    /// Sized for `capacity` items at false-positive rate `fpr`.
    pub fn with_rate(capacity: usize, fpr: f64) -> Self {
        let n = capacity.max(1) as f64;
        let ln2 = std::f64::consts::LN_2;
        let m = (-(n * fpr.ln()) / (ln2 * ln2)).ceil().max(64.0) as u64;
        let k = ((m as f64 / n) * ln2).round().max(1.0) as u32;
        Self { bits: vec![0; m.div_ceil(64) as usize], num_bits: m, num_hashes: k }
    }

    pub fn num_bits(&self) -> u64 {
        self.num_bits
    }

    pub fn num_hashes(&self) -> u32 {
        self.num_hashes
    }

    fn indices(&self, item: &[u8]) -> impl Iterator<Item = u64> + '_ {
        let h = Sha256::digest(item);
        let h1 = u64::from_le_bytes(h[..8].try_into().unwrap());
        let h2 = u64::from_le_bytes(h[8..16].try_into().unwrap()) | 1;
        (0..self.num_hashes as u64).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % self.num_bits)
    }

    pub fn insert(&mut self, item: &[u8]) {
        let idx: Vec<u64> = self.indices(item).collect();
        for i in idx {
            self.bits[(i / 64) as usize] |= 1 << (i % 64);
        }
    }

    pub fn contains(&self, item: &[u8]) -> bool {
        self.indices(item).all(|i| self.bits[(i / 64) as usize] & (1 << (i % 64)) != 0)
    }

    pub fn clear(&mut self) {
        self.bits.iter_mut().for_each(|w| *w = 0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizing() {
        let b = BloomFilter::with_rate(100_000, 1e-4);
        // m = -n ln p / ln2^2 ≈ 19.17 bits per item, k ≈ 13
        assert_eq!(b.num_hashes(), 13);
        assert!((1_916_000..1_918_000).contains(&b.num_bits()));
    }

    #[test]
    fn no_false_negatives() {
        let mut b = BloomFilter::with_rate(1000, 1e-4);
        for i in 0..1000 {
            b.insert(format!("jti-{i}").as_bytes());
        }
        assert!((0..1000).all(|i| b.contains(format!("jti-{i}").as_bytes())));
        b.clear();
        assert!(!b.contains(b"jti-1"));
    }
}
