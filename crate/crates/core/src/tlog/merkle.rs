//! Incremental Merkle tree in the certificate-transparency layout.
//!
//! Leaves are hashed as `H(0x00 || data)` and interior nodes as
//! `H(0x01 || left || right)`. A tree of `n` leaves splits at the largest
//! power of two below `n`, so trailing nodes are promoted rather than
//! duplicated.
//!
//! Only perfect, aligned subtrees are stored (`levels[l][i]` covers leaves
//! `i*2^l .. (i+1)*2^l`). Those nodes never change once written, which makes
//! every historical root and proof reproducible from the same storage.

use serde::{Deserialize, Serialize};

use crate::hash::{sha256_parts, Hash256};

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

pub fn leaf_hash(data: &[u8]) -> Hash256 {
    sha256_parts(&[&[LEAF_PREFIX], data])
}

pub fn node_hash(left: &Hash256, right: &Hash256) -> Hash256 {
    sha256_parts(&[&[NODE_PREFIX], left.as_bytes(), right.as_bytes()])
}

/// Root of the empty tree.
pub fn empty_root() -> Hash256 {
    sha256_parts(&[])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MerkleRoot {
    pub hash: Hash256,
    pub tree_size: u64,
}

/// Which side of the running hash the sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub sibling: Hash256,
    pub side: Side,
}

/// Inclusion proof, ordered from the leaf upwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    pub path: Vec<ProofStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("index {index} out of range for tree size {tree_size} (current size {size})")]
pub struct OutOfRange {
    pub index: u64,
    pub tree_size: u64,
    pub size: u64,
}

fn split_point(n: u64) -> u64 {
    debug_assert!(n >= 2);
    1 << (63 - (n - 1).leading_zeros())
}

#[derive(Debug, Clone, Default)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash256>>,
    hash_ops: u64,
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

    /// Total SHA-256 invocations made by `append` and `root` so far.
    pub fn hash_ops(&self) -> u64 {
        self.hash_ops
    }

    pub fn leaf(&self, index: u64) -> Option<Hash256> {
        self.levels.first()?.get(index as usize).copied()
    }

    /// Appends raw entry bytes and returns the new root.
    pub fn append(&mut self, data: &[u8]) -> MerkleRoot {
        self.hash_ops += 1;
        self.append_leaf_hash(leaf_hash(data))
    }

    pub fn append_leaf_hash(&mut self, leaf: Hash256) -> MerkleRoot {
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        self.levels[0].push(leaf);
        let mut level = 0;
        let mut cur = leaf;
        // A right child completes its parent.
        while self.levels[level].len() % 2 == 0 {
            let left = self.levels[level][self.levels[level].len() - 2];
            cur = node_hash(&left, &cur);
            self.hash_ops += 1;
            level += 1;
            if self.levels.len() == level {
                self.levels.push(Vec::new());
            }
            self.levels[level].push(cur);
        }
        self.root()
    }

    /// Current root, folded from the perfect subtrees on the right frontier.
    pub fn root(&mut self) -> MerkleRoot {
        let n = self.len();
        let mut acc: Option<Hash256> = None;
        for level in 0..self.levels.len() {
            if n >> level & 1 == 1 {
                let node = self.levels[level][((n >> level) - 1) as usize];
                acc = Some(match acc {
                    None => node,
                    Some(right) => {
                        self.hash_ops += 1;
                        node_hash(&node, &right)
                    }
                });
            }
        }
        MerkleRoot {
            hash: acc.unwrap_or_else(empty_root),
            tree_size: n,
        }
    }

    /// Drops every leaf at or beyond `n`.
    pub fn truncate(&mut self, n: u64) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            level.truncate((n >> l) as usize);
        }
        while self.levels.last().is_some_and(Vec::is_empty) && self.levels.len() > 1 {
            self.levels.pop();
        }
    }

    /// Hash of leaves `start..end`, where the range is a node of the tree of
    /// some size (start aligned to the largest power of two below the width).
    fn subtree(&self, start: u64, end: u64) -> Hash256 {
        let width = end - start;
        if width.is_power_of_two() && start % width == 0 {
            let level = width.trailing_zeros() as usize;
            return self.levels[level][(start >> level) as usize];
        }
        let k = split_point(width);
        node_hash(&self.subtree(start, start + k), &self.subtree(start + k, end))
    }

    pub fn root_at(&self, tree_size: u64) -> Result<MerkleRoot, OutOfRange> {
        if tree_size > self.len() {
            return Err(OutOfRange {
                index: tree_size,
                tree_size,
                size: self.len(),
            });
        }
        let hash = if tree_size == 0 {
            empty_root()
        } else {
            self.subtree(0, tree_size)
        };
        Ok(MerkleRoot { hash, tree_size })
    }

    pub fn prove_inclusion(&self, index: u64, tree_size: u64) -> Result<MerkleProof, OutOfRange> {
        if index >= tree_size || tree_size > self.len() {
            return Err(OutOfRange {
                index,
                tree_size,
                size: self.len(),
            });
        }
        let mut path = Vec::new();
        self.path(index, 0, tree_size, &mut path);
        Ok(MerkleProof {
            leaf_index: index,
            tree_size,
            path,
        })
    }

    fn path(&self, m: u64, start: u64, end: u64, out: &mut Vec<ProofStep>) {
        if end - start <= 1 {
            return;
        }
        let k = split_point(end - start);
        if m < start + k {
            self.path(m, start, start + k, out);
            out.push(ProofStep {
                sibling: self.subtree(start + k, end),
                side: Side::Right,
            });
        } else {
            self.path(m, start + k, end, out);
            out.push(ProofStep {
                sibling: self.subtree(start, start + k),
                side: Side::Left,
            });
        }
    }

    /// Consistency proof between tree sizes `old` and `new`.
    pub fn prove_consistency(&self, old: u64, new: u64) -> Result<Vec<Hash256>, OutOfRange> {
        if old == 0 || old > new || new > self.len() {
            return Err(OutOfRange {
                index: old,
                tree_size: new,
                size: self.len(),
            });
        }
        let mut out = Vec::new();
        self.subproof(old, 0, new, true, &mut out);
        Ok(out)
    }

    fn subproof(&self, m: u64, start: u64, end: u64, complete: bool, out: &mut Vec<Hash256>) {
        let n = end - start;
        if m == n {
            if !complete {
                out.push(self.subtree(start, end));
            }
            return;
        }
        let k = split_point(n);
        if m <= k {
            self.subproof(m, start, start + k, complete, out);
            out.push(self.subtree(start + k, end));
        } else {
            self.subproof(m - k, start + k, end, false, out);
            out.push(self.subtree(start, start + k));
        }
    }
}

/// Expected sibling sides for `index` in a tree of `tree_size`, leaf upwards.
fn expected_sides(index: u64, tree_size: u64) -> Vec<Side> {
    let mut sides = Vec::new();
    let (mut start, mut end) = (0, tree_size);
    while end - start > 1 {
        let k = split_point(end - start);
        if index < start + k {
            sides.push(Side::Right);
            end = start + k;
        } else {
            sides.push(Side::Left);
            start += k;
        }
    }
    sides.reverse();
    sides
}

/// Accepts iff the proof's shape matches its claimed position and folding
/// `leaf` along the path reproduces `root`.
pub fn verify_inclusion(leaf: &Hash256, proof: &MerkleProof, root: &MerkleRoot) -> bool {
    if proof.tree_size != root.tree_size || proof.leaf_index >= proof.tree_size {
        return false;
    }
    let sides = expected_sides(proof.leaf_index, proof.tree_size);
    if sides.len() != proof.path.len() || sides.iter().zip(&proof.path).any(|(s, p)| *s != p.side)
    {
        return false;
    }
    let folded = proof.path.iter().fold(*leaf, |acc, step| match step.side {
        Side::Right => node_hash(&acc, &step.sibling),
        Side::Left => node_hash(&step.sibling, &acc),
    });
    folded == root.hash
}

/// Checks that the tree at `old` is a prefix of the tree at `new`.
pub fn verify_consistency(old: &MerkleRoot, new: &MerkleRoot, proof: &[Hash256]) -> bool {
    let (first, second) = (old.tree_size, new.tree_size);
    if first == 0 || first > second {
        return false;
    }
    if first == second {
        return proof.is_empty() && old.hash == new.hash;
    }
    let mut nodes: Vec<Hash256> = Vec::with_capacity(proof.len() + 1);
    if first.is_power_of_two() {
        nodes.push(old.hash);
    }
    nodes.extend_from_slice(proof);
    let Some((&seed, rest)) = nodes.split_first() else {
        return false;
    };
    let mut fn_ = first - 1;
    let mut sn = second - 1;
    while fn_ & 1 == 1 {
        fn_ >>= 1;
        sn >>= 1;
    }
    let (mut fr, mut sr) = (seed, seed);
    for c in rest {
        if sn == 0 {
            return false;
        }
        if fn_ & 1 == 1 || fn_ == sn {
            fr = node_hash(c, &fr);
            sr = node_hash(c, &sr);
            while fn_ & 1 == 0 && fn_ != 0 {
                fn_ >>= 1;
                sn >>= 1;
            }
        } else {
            sr = node_hash(&sr, c);
        }
        fn_ >>= 1;
        sn >>= 1;
    }
    fr == old.hash && sr == new.hash && sn == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_root(leaves: &[Hash256]) -> Hash256 {
        match leaves.len() {
            0 => empty_root(),
            1 => leaves[0],
            n => {
                let k = split_point(n as u64) as usize;
                node_hash(&naive_root(&leaves[..k]), &naive_root(&leaves[k..]))
            }
        }
    }

    fn build(n: u64) -> (MerkleTree, Vec<Hash256>) {
        let mut t = MerkleTree::new();
        let mut leaves = Vec::new();
        for i in 0..n {
            let data = i.to_be_bytes();
            leaves.push(leaf_hash(&data));
            t.append(&data);
        }
        (t, leaves)
    }

    #[test]
    fn small_trees() {
        let mut t = MerkleTree::new();
        assert_eq!(t.root().hash, empty_root());
        let r1 = t.append(b"a");
        assert_eq!(r1.hash, leaf_hash(b"a"));
        let r2 = t.append(b"b");
        assert_eq!(r2.hash, node_hash(&leaf_hash(b"a"), &leaf_hash(b"b")));
        assert_eq!(r2.tree_size, 2);
    }

    #[test]
    fn roots_match_naive_rebuild() {
        let (t, leaves) = build(130);
        for size in 0..=130 {
            assert_eq!(t.root_at(size).unwrap().hash, naive_root(&leaves[..size as usize]));
        }
    }

    #[test]
    fn exhaustive_inclusion_up_to_64() {
        let (t, leaves) = build(64);
        for size in 1..=64u64 {
            let root = t.root_at(size).unwrap();
            for i in 0..size {
                let p = t.prove_inclusion(i, size).unwrap();
                assert!(verify_inclusion(&leaves[i as usize], &p, &root), "{i}/{size}");
                if size.is_power_of_two() {
                    assert_eq!(p.path.len() as u32, size.trailing_zeros());
                } else {
                    assert!(p.path.len() as u32 <= 64 - (size - 1).leading_zeros());
                }
                if size > 1 {
                    let other = leaves[((i + 1) % size) as usize];
                    assert!(!verify_inclusion(&other, &p, &root));
                }
            }
        }
    }

    #[test]
    fn corrupted_siblings_rejected() {
        let (t, leaves) = build(37);
        let root = t.root_at(37).unwrap();
        let p = t.prove_inclusion(20, 37).unwrap();
        for j in 0..p.path.len() {
            for bit in [0usize, 77, 255] {
                let mut bad = p.clone();
                let mut bytes = *bad.path[j].sibling.as_bytes();
                bytes[bit / 8] ^= 1 << (bit % 8);
                bad.path[j].sibling = Hash256::from_bytes(bytes);
                assert!(!verify_inclusion(&leaves[20], &bad, &root));
            }
            let mut flipped = p.clone();
            flipped.path[j].side = match flipped.path[j].side {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
            };
            assert!(!verify_inclusion(&leaves[20], &flipped, &root));
        }
        let mut wrong_index = p.clone();
        wrong_index.leaf_index = 21;
        assert!(!verify_inclusion(&leaves[20], &wrong_index, &root));
    }

    #[test]
    fn singleton_proof_is_empty() {
        let (t, leaves) = build(1);
        let p = t.prove_inclusion(0, 1).unwrap();
        assert!(p.path.is_empty());
        assert!(verify_inclusion(&leaves[0], &p, &t.root_at(1).unwrap()));
    }

    #[test]
    fn out_of_range() {
        let (t, _) = build(8);
        assert!(t.prove_inclusion(8, 8).is_err());
        assert!(t.prove_inclusion(0, 9).is_err());
        assert!(t.root_at(9).is_err());
    }

    #[test]
    fn truncate_restores_prior_state() {
        let (mut t, _) = build(50);
        let r = t.root_at(23).unwrap();
        t.truncate(23);
        assert_eq!(t.len(), 23);
        assert_eq!(t.root(), r);
        let (mut fresh, _) = build(23);
        assert_eq!(fresh.root(), r);
        for i in 23..50u64 {
            t.append(&i.to_be_bytes());
        }
        let (mut full, _) = build(50);
        assert_eq!(t.root(), full.root());
    }

    #[test]
    fn consistency_all_pairs() {
        let (t, _) = build(40);
        for old in 1..=40 {
            for new in old..=40 {
                let p = t.prove_consistency(old, new).unwrap();
                let ro = t.root_at(old).unwrap();
                let rn = t.root_at(new).unwrap();
                assert!(verify_consistency(&ro, &rn, &p), "{old}->{new}");
                if old < new && !p.is_empty() {
                    let mut bad = p.clone();
                    let mut b = *bad[0].as_bytes();
                    b[0] ^= 1;
                    bad[0] = Hash256::from_bytes(b);
                    assert!(!verify_consistency(&ro, &rn, &bad));
                }
            }
        }
        let (other, _) = build(41);
        let p = t.prove_consistency(10, 40).unwrap();
        let forged_old = MerkleRoot {
            hash: other.root_at(11).unwrap().hash,
            tree_size: 10,
        };
        assert!(!verify_consistency(&forged_old, &t.root_at(40).unwrap(), &p));
    }

    #[test]
    fn hash_ops_logarithmic() {
        let (t, _) = build(1 << 10);
        let per_append = t.hash_ops() as f64 / 1024.0;
        assert!(per_append <= 2.0 * 10.0, "{per_append}");
    }
}
