//! Tree construction checked against a direct recursive transcription of
//! the RFC 6962 definitions (MTH, PATH, PROOF/SUBPROOF).

use aegon_core::merkle::{empty_root, inclusion_path_len, leaf_hash, node_hash, verify_consistency_path, verify_inclusion_path, Digest, MerkleTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

fn sha(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn k(n: usize) -> usize {
    let mut k = 1;
    while k * 2 < n {
        k *= 2;
    }
    k
}

fn mth(d: &[Vec<u8>]) -> Digest {
    match d.len() {
        0 => sha(&[]),
        1 => sha(&[&[0], &d[0]]),
        n => {
            let k = k(n);
            sha(&[&[1], &mth(&d[..k]), &mth(&d[k..])])
        }
    }
}

fn path(m: usize, d: &[Vec<u8>]) -> Vec<Digest> {
    let n = d.len();
    if n <= 1 {
        return vec![];
    }
    let k = k(n);
    if m < k {
        let mut p = path(m, &d[..k]);
        p.push(mth(&d[k..]));
        p
    } else {
        let mut p = path(m - k, &d[k..]);
        p.push(mth(&d[..k]));
        p
    }
}

fn subproof(m: usize, d: &[Vec<u8>], b: bool) -> Vec<Digest> {
    let n = d.len();
    if m == n {
        return if b { vec![] } else { vec![mth(d)] };
    }
    let k = k(n);
    if m <= k {
        let mut p = subproof(m, &d[..k], b);
        p.push(mth(&d[k..]));
        p
    } else {
        let mut p = subproof(m - k, &d[k..], false);
        p.push(mth(&d[..k]));
        p
    }
}

fn proof(m: usize, d: &[Vec<u8>]) -> Vec<Digest> {
    if m == 0 || m == d.len() {
        vec![]
    } else {
        subproof(m, d, true)
    }
}

fn random_data(rng: &mut ChaCha20Rng, n: usize) -> Vec<Vec<u8>> {
    (0..n).map(|_| (0..rng.gen_range(0..40)).map(|_| rng.gen()).collect()).collect()
}

fn tree_of(d: &[Vec<u8>]) -> MerkleTree {
    let mut t = MerkleTree::new();
    for x in d {
        t.push(leaf_hash(x));
    }
    t
}

#[test]
fn hashing_primitives_match_definitions() {
    assert_eq!(empty_root(), sha(&[]));
    assert_eq!(leaf_hash(b"abc"), sha(&[&[0], b"abc"]));
    let (a, b) = (leaf_hash(b"a"), leaf_hash(b"b"));
    assert_eq!(node_hash(&a, &b), sha(&[&[1], &a, &b]));
}

#[test]
fn exhaustive_small_trees() {
    let mut rng = ChaCha20Rng::seed_from_u64(6962);
    let d = random_data(&mut rng, 40);
    let t = tree_of(&d);
    for n in 0..=d.len() {
        assert_eq!(t.root(n as u64).unwrap(), mth(&d[..n]), "root {n}");
        for m in 0..n {
            let p = t.inclusion_path(m as u64, n as u64).unwrap();
            assert_eq!(p, path(m, &d[..n]), "path {m}/{n}");
            assert_eq!(p.len(), inclusion_path_len(m as u64, n as u64));
            assert!(verify_inclusion_path(m as u64, n as u64, &leaf_hash(&d[m]), &p, &mth(&d[..n])));
        }
        for m in 0..=n {
            let c = t.consistency_path(m as u64, n as u64).unwrap();
            assert_eq!(c, proof(m, &d[..n]), "consistency {m}->{n}");
            assert!(verify_consistency_path(m as u64, n as u64, &mth(&d[..m]), &mth(&d[..n]), &c));
        }
    }
}

#[test]
fn random_larger_trees_sampled() {
    let mut rng = ChaCha20Rng::seed_from_u64(512);
    for _ in 0..8 {
        let n = rng.gen_range(41..=512);
        let d = random_data(&mut rng, n);
        let t = tree_of(&d);
        assert_eq!(t.root(n as u64).unwrap(), mth(&d));
        for _ in 0..20 {
            let m = rng.gen_range(0..n);
            assert_eq!(t.inclusion_path(m as u64, n as u64).unwrap(), path(m, &d));
            let old = rng.gen_range(0..=n);
            assert_eq!(t.consistency_path(old as u64, n as u64).unwrap(), proof(old, &d));
        }
    }
}

#[test]
fn tampered_history_fails_consistency() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let d = random_data(&mut rng, 7);
    let honest = tree_of(&d);
    let old_root = honest.root(4).unwrap();
    let mut forged = d.clone();
    forged[1] = b"rewritten".to_vec();
    let forged_tree = tree_of(&forged);
    let c = forged_tree.consistency_path(4, 7).unwrap();
    assert!(!verify_consistency_path(4, 7, &old_root, &forged_tree.root(7).unwrap(), &c));
    assert!(verify_consistency_path(4, 7, &old_root, &honest.root(7).unwrap(), &honest.consistency_path(4, 7).unwrap()));
}

#[test]
fn bit_flips_break_proofs() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let d = random_data(&mut rng, 100);
    let t = tree_of(&d);
    let root = t.root(100).unwrap();
    for _ in 0..500 {
        let m = rng.gen_range(0..100);
        let mut p = t.inclusion_path(m, 100).unwrap();
        let i = rng.gen_range(0..p.len());
        p[i][rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8);
        assert!(!verify_inclusion_path(m, 100, &leaf_hash(&d[m as usize]), &p, &root));

        let old = rng.gen_range(1..100);
        let mut c = t.consistency_path(old, 100).unwrap();
        let i = rng.gen_range(0..c.len());
        c[i][rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8);
        assert!(!verify_consistency_path(old, 100, &t.root(old).unwrap(), &root, &c));
    }
}
