//! RFC 6962 Merkle tree: leaf and interior hashing, tree roots, audit paths
//! and consistency proofs, plus the pure verification routines an auditor
//! runs without any ledger state.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Digest = [u8; 32];

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MerkleError {
    #[error("tree size {requested} exceeds current size {current}")]
    SizeOutOfRange { requested: u64, current: u64 },
    #[error("leaf index {index} is not below tree size {tree_size}")]
    IndexOutOfRange { index: u64, tree_size: u64 },
    #[error("consistency sizes out of order: {old} > {new}")]
    SizeOrder { old: u64, new: u64 },
    #[error("digest must be 32 bytes of lowercase hex")]
    BadDigest,
}

/// `SHA-256(0x00 || data)`.
pub fn leaf_hash(data: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([LEAF_PREFIX]);
    h.update(data);
    h.finalize().into()
}

/// `SHA-256(0x01 || left || right)`.
pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([NODE_PREFIX]);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

/// Root of the empty tree, `SHA-256("")`.
pub fn empty_root() -> Digest {
    Sha256::digest([]).into()
}

pub fn digest_hex(d: &Digest) -> String {
    hex::encode(d)
}

pub fn parse_digest(s: &str) -> Result<Digest, MerkleError> {
    if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(MerkleError::BadDigest);
    }
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(|_| MerkleError::BadDigest)?;
    Ok(out)
}

/// Largest power of two strictly less than `n` (`n >= 2`).
fn split_point(n: u64) -> u64 {
    debug_assert!(n >= 2);
    1 << (63 - (n - 1).leading_zeros())
}

/// In-memory Merkle tree over leaf hashes.
///
/// `levels[h][i]` is the hash of the complete subtree covering leaves
/// `[i * 2^h, (i + 1) * 2^h)`; only complete subtrees are stored, so every
/// root, path and proof for any historical size is answered from this table.
#[derive(Debug, Clone, Default)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.levels.first().map_or(0, |l| l.len() as u64)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, index: u64) -> Option<Digest> {
        self.levels.first().and_then(|l| l.get(index as usize)).copied()
    }

    pub fn push(&mut self, leaf_digest: Digest) {
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        self.levels[0].push(leaf_digest);
        let mut height = 0;
        loop {
            let len = self.levels[height].len();
            if len % 2 == 1 {
                break;
            }
            let combined = node_hash(&self.levels[height][len - 2], &self.levels[height][len - 1]);
            if self.levels.len() == height + 1 {
                self.levels.push(Vec::new());
            }
            self.levels[height + 1].push(combined);
            height += 1;
        }
    }

    /// Hash of leaves `[lo, hi)`, where the range is a subtree of the RFC 6962
    /// decomposition (`lo` aligned to the largest power of two below the width).
    fn range_hash(&self, lo: u64, hi: u64) -> Digest {
        let n = hi - lo;
        if n == 0 {
            return empty_root();
        }
        if n.is_power_of_two() && lo.is_multiple_of(n) {
            let h = n.trailing_zeros() as usize;
            return self.levels[h][(lo / n) as usize];
        }
        let k = split_point(n);
        node_hash(&self.range_hash(lo, lo + k), &self.range_hash(lo + k, hi))
    }

    pub fn root(&self, tree_size: u64) -> Result<Digest, MerkleError> {
        self.check_size(tree_size)?;
        Ok(self.range_hash(0, tree_size))
    }

    pub fn inclusion_path(&self, leaf_index: u64, tree_size: u64) -> Result<Vec<Digest>, MerkleError> {
        self.check_size(tree_size)?;
        if leaf_index >= tree_size {
            return Err(MerkleError::IndexOutOfRange { index: leaf_index, tree_size });
        }
        let mut path = Vec::new();
        self.path_into(leaf_index, 0, tree_size, &mut path);
        Ok(path)
    }

    fn path_into(&self, m: u64, lo: u64, hi: u64, path: &mut Vec<Digest>) {
        let n = hi - lo;
        if n <= 1 {
            return;
        }
        let k = split_point(n);
        if m < k {
            self.path_into(m, lo, lo + k, path);
            path.push(self.range_hash(lo + k, hi));
        } else {
            self.path_into(m - k, lo + k, hi, path);
            path.push(self.range_hash(lo, lo + k));
        }
    }

    pub fn consistency_path(&self, old_size: u64, new_size: u64) -> Result<Vec<Digest>, MerkleError> {
        self.check_size(new_size)?;
        if old_size > new_size {
            return Err(MerkleError::SizeOrder { old: old_size, new: new_size });
        }
        let mut path = Vec::new();
        if old_size > 0 && old_size < new_size {
            self.subproof_into(old_size, 0, new_size, true, &mut path);
        }
        Ok(path)
    }

    fn subproof_into(&self, m: u64, lo: u64, hi: u64, complete: bool, path: &mut Vec<Digest>) {
        let n = hi - lo;
        if m == n {
            if !complete {
                path.push(self.range_hash(lo, hi));
            }
            return;
        }
        let k = split_point(n);
        if m <= k {
            self.subproof_into(m, lo, lo + k, complete, path);
            path.push(self.range_hash(lo + k, hi));
        } else {
            self.subproof_into(m - k, lo + k, hi, false, path);
            path.push(self.range_hash(lo, lo + k));
        }
    }

    fn check_size(&self, tree_size: u64) -> Result<(), MerkleError> {
        if tree_size > self.len() {
            return Err(MerkleError::SizeOutOfRange { requested: tree_size, current: self.len() });
        }
        Ok(())
    }
}

/// Recomputes the root from an audit path. Returns `None` when the path has
/// the wrong shape for `(leaf_index, tree_size)`.
pub fn root_from_inclusion_path(leaf_index: u64, tree_size: u64, leaf_digest: &Digest, path: &[Digest]) -> Option<Digest> {
    if leaf_index >= tree_size {
        return None;
    }
    let mut fnode = leaf_index;
    let mut snode = tree_size - 1;
    let mut r = *leaf_digest;
    for p in path {
        if snode == 0 {
            return None;
        }
        if fnode & 1 == 1 || fnode == snode {
            r = node_hash(p, &r);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            r = node_hash(&r, p);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    (snode == 0).then_some(r)
}

pub fn verify_inclusion_path(leaf_index: u64, tree_size: u64, leaf_digest: &Digest, path: &[Digest], root: &Digest) -> bool {
    root_from_inclusion_path(leaf_index, tree_size, leaf_digest, path).is_some_and(|r| &r == root)
}

pub fn verify_consistency_path(old_size: u64, new_size: u64, old_root: &Digest, new_root: &Digest, path: &[Digest]) -> bool {
    if old_size > new_size {
        return false;
    }
    if old_size == new_size {
        return path.is_empty() && old_root == new_root;
    }
    if old_size == 0 {
        return path.is_empty() && *old_root == empty_root();
    }
    if path.is_empty() {
        return false;
    }
    let mut nodes: Vec<Digest> = Vec::with_capacity(path.len() + 1);
    if old_size.is_power_of_two() {
        nodes.push(*old_root);
    }
    nodes.extend_from_slice(path);

    let mut fnode = old_size - 1;
    let mut snode = new_size - 1;
    while fnode & 1 == 1 {
        fnode >>= 1;
        snode >>= 1;
    }
    let mut fr = nodes[0];
    let mut sr = nodes[0];
    for c in &nodes[1..] {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            fr = node_hash(c, &fr);
            sr = node_hash(c, &sr);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            sr = node_hash(&sr, c);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    snode == 0 && &fr == old_root && &sr == new_root
}

mod hex_digests {
    use super::{parse_digest, Digest};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Digest], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Digest>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter().map(|s| parse_digest(s).map_err(D::Error::custom)).collect()
    }
}

pub(crate) mod hex_digest {
    use super::{parse_digest, Digest};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Digest, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Digest, D::Error> {
        let raw = String::deserialize(d)?;
        parse_digest(&raw).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    #[serde(with = "hex_digests")]
    pub audit_path: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyProof {
    pub old_size: u64,
    pub new_size: u64,
    #[serde(with = "hex_digests")]
    pub path: Vec<Digest>,
}

/// Number of digests in the audit path for `(leaf_index, tree_size)`.
pub fn inclusion_path_len(leaf_index: u64, tree_size: u64) -> usize {
    let mut len = 0;
    let (mut m, mut n) = (leaf_index, tree_size);
    while n > 1 {
        let k = split_point(n);
        if m >= k {
            m -= k;
            n -= k;
        } else {
            n = k;
        }
        len += 1;
    }
    len
}
