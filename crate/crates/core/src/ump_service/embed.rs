//! Text embedders. The built-in one hashes token unigrams and bigrams into a
//! fixed number of signed buckets under a deployment key, so equal text
//! always lands on the same vector and overlapping text on nearby ones.

use crate::crypto::{self, Key32};
use crate::retrieval::bm25::tokenize;

pub const HASH_DIM: usize = 64;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

pub struct HashEmbedder {
    key: Key32,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(key: Key32) -> Self {
        Self { key, dim: HASH_DIM }
    }

    fn add(&self, v: &mut [f32], feature: &str, weight: f32) {
        let h = crypto::sha256_parts(&[&self.key, feature.as_bytes()]);
        let slot = u16::from_be_bytes([h[0], h[1]]) as usize % self.dim;
        let sign = if h[2] & 1 == 0 { 1.0 } else { -1.0 };
        v[slot] += sign * weight;
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    /// L2-normalised; text without tokens maps to the zero vector.
    fn embed(&self, text: &str) -> Vec<f32> {
        let toks = tokenize(text);
        let mut v = vec![0f32; self.dim];
        for t in &toks {
            self.add(&mut v, &format!("1:{t}"), 1.0);
        }
        for w in toks.windows(2) {
            self.add(&mut v, &format!("2:{} {}", w[0], w[1]), 0.5);
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::hnsw::cosine;

    #[test]
    fn deterministic_and_normalised() {
        let e = HashEmbedder::new([1; 32]);
        let a = e.embed("Project: Snake Game, Language: Python");
        assert_eq!(a, e.embed("project snake game language python"));
        assert_eq!(a.len(), HASH_DIM);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-6);
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        assert!(e.embed("  ,, ").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn key_changes_the_space() {
        let a = HashEmbedder::new([1; 32]).embed("rust borrow checker");
        let b = HashEmbedder::new([2; 32]).embed("rust borrow checker");
        assert_ne!(a, b);
    }

    #[test]
    fn overlap_is_closer_than_disjoint() {
        let e = HashEmbedder::new([9; 32]);
        let q = e.embed("snake game in python");
        let near = e.embed("the snake game is written in python");
        let far = e.embed("quarterly tax filing deadline");
        assert!(cosine(&q, &near) > cosine(&q, &far));
    }
}
