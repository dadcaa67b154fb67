//! Binary Merkle tree with domain-separated leaves (0x00) and internal nodes
//! (0x01). An unpaired node is promoted to the next level unchanged.

use crate::crypto::{self, Hash32};

pub fn empty_root() -> Hash32 {
    crypto::sha256(b"MT-EMPTY")
}

pub fn leaf_hash(data: &[u8]) -> Hash32 {
    crypto::sha256_parts(&[&[0x00], data])
}

pub fn node_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    crypto::sha256_parts(&[&[0x01], left, right])
}

pub fn merkle_root(leaves: &[Hash32]) -> Hash32 {
    MerkleTree::build(leaves.to_vec()).root()
}

/// Which side a sibling sits on in a proof step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

pub type MerkleProof = Vec<(Side, Hash32)>;

#[derive(Clone, Debug, Default)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash32>>,
}

impl MerkleTree {
    pub fn build(leaves: Vec<Hash32>) -> Self {
        let mut levels = vec![leaves];
        while levels.last().map_or(false, |l| l.len() > 1) {
            let prev = levels.last().expect("non-empty");
            let next = prev
                .chunks(2)
                .map(|pair| match pair {
                    [a, b] => node_hash(a, b),
                    [a] => *a,
                    _ => unreachable!(),
                })
                .collect();
            levels.push(next);
        }
        Self { levels }
    }

    pub fn leaves(&self) -> &[Hash32] {
        &self.levels[0]
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn root(&self) -> Hash32 {
        match self.levels.last() {
            Some(top) if top.len() == 1 => top[0],
            _ => empty_root(),
        }
    }

    pub fn proof(&self, mut index: usize) -> Option<MerkleProof> {
        if index >= self.len() {
            return None;
        }
        let mut path = Vec::new();
        for level in &self.levels[..self.levels.len() - 1] {
            let sib = index ^ 1;
            if sib < level.len() {
                let side = if sib < index { Side::Left } else { Side::Right };
                path.push((side, level[sib]));
            }
            index /= 2;
        }
        Some(path)
    }
}

pub fn verify_proof(leaf: &Hash32, proof: &[(Side, Hash32)], root: &Hash32) -> bool {
    let acc = proof.iter().fold(*leaf, |acc, (side, sib)| match side {
        Side::Left => node_hash(sib, &acc),
        Side::Right => node_hash(&acc, sib),
    });
    crypto::ct_eq(&acc, root)
}
