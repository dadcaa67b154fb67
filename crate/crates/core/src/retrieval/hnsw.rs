//! Hierarchical navigable small-world graph over cosine similarity, with an
//! optional noisy traversal.
//!
//! With noise `ρ > 0`, every time the search expands a node it also, with
//! probability `ρ`, touches one random neighbour of that node as a decoy. Decoy
//! touches are counted in [`SearchStats::visits`] but never alter the search
//! frontier, so the result set is the same as with `ρ = 0`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HnswParams {
    pub m: usize,
    pub m0: usize,
    pub ef_construct: usize,
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, m0: 32, ef_construct: 200, ef_search: 64 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Distance evaluations, decoys included.
    pub visits: usize,
    pub decoys: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Scored(f64, u32);

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    // Orders by distance, then node, so heaps are deterministic.
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub struct Hnsw {
    params: HnswParams,
    dim: usize,
    ids: Vec<String>,
    pos: HashMap<String, u32>,
    vectors: Vec<Vec<f32>>,
    /// node → level → neighbours
    links: Vec<Vec<Vec<u32>>>,
    deleted: HashSet<u32>,
    entry: Option<u32>,
    rng: StdRng,
}

impl Hnsw {
    pub fn new(dim: usize, params: HnswParams, seed: u64) -> Self {
        Self {
            params,
            dim,
            ids: Vec::new(),
            pos: HashMap::new(),
            vectors: Vec::new(),
            links: Vec::new(),
            deleted: HashSet::new(),
            entry: None,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ids.len() - self.deleted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.pos.get(id).map_or(false, |p| !self.deleted.contains(p))
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.pos.get(id).filter(|p| !self.deleted.contains(p)).map(|&p| self.vectors[p as usize].as_slice())
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: v.len() });
        }
        Ok(())
    }

    fn dist(&self, q: &[f32], node: u32) -> f64 {
        1.0 - cosine(q, &self.vectors[node as usize])
    }

    fn max_level(&self) -> usize {
        self.entry.map_or(0, |e| self.links[e as usize].len() - 1)
    }

    /// Adds a vector. Re-inserting a live id is an error; a deleted id may
    /// come back.
    pub fn insert(&mut self, id: &str, vector: Vec<f32>) -> Result<()> {
        self.check_dim(&vector)?;
        if self.contains(id) {
            return Err(Error::InvalidInput(format!("vector {id} already indexed")));
        }
        let node = self.ids.len() as u32;
        let ml = 1.0 / (self.params.m.max(2) as f64).ln();
        let u: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let level = (-u.ln() * ml).floor() as usize;
        self.ids.push(id.to_string());
        self.pos.insert(id.to_string(), node);
        self.vectors.push(vector);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            return Ok(());
        };
        let q = self.vectors[node as usize].clone();
        let top = self.max_level();
        let mut stats = SearchStats::default();
        for l in (level + 1..=top).rev() {
            ep = self.search_layer(&q, &[ep], 1, l, None, &mut stats)[0].1;
        }
        let mut eps = vec![ep];
        for l in (0..=level.min(top)).rev() {
            let w = self.search_layer(&q, &eps, self.params.ef_construct, l, None, &mut stats);
            let cap = if l == 0 { self.params.m0 } else { self.params.m };
            let chosen: Vec<u32> = w.iter().take(self.params.m).map(|s| s.1).collect();
            for &n in &chosen {
                self.links[node as usize][l].push(n);
                self.links[n as usize][l].push(node);
                if self.links[n as usize][l].len() > cap {
                    self.prune(n, l, cap);
                }
            }
            eps = w.iter().map(|s| s.1).collect();
        }
        if level > top {
            self.entry = Some(node);
        }
        Ok(())
    }

    fn prune(&mut self, n: u32, l: usize, cap: usize) {
        let base = self.vectors[n as usize].clone();
        let mut scored: Vec<Scored> = self.links[n as usize][l].iter().map(|&x| Scored(self.dist(&base, x), x)).collect();
        scored.sort();
        scored.dedup_by_key(|s| s.1);
        scored.truncate(cap);
        self.links[n as usize][l] = scored.into_iter().map(|s| s.1).collect();
    }

    /// Marks `id` deleted. It keeps routing traffic but is never returned.
    pub fn remove(&mut self, id: &str) -> bool {
        match self.pos.get(id) {
            Some(&p) => self.deleted.insert(p),
            None => false,
        }
    }

    /// Beam search on one layer. Returns up to `ef` nodes nearest first.
    fn search_layer(
        &self,
        q: &[f32],
        eps: &[u32],
        ef: usize,
        level: usize,
        mut noise: Option<(&mut StdRng, f64)>,
        stats: &mut SearchStats,
    ) -> Vec<Scored> {
        let mut visited: HashSet<u32> = eps.iter().copied().collect();
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut w: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in eps {
            let s = Scored(self.dist(q, e), e);
            stats.visits += 1;
            candidates.push(Reverse(s));
            w.push(s);
        }
        while w.len() > ef {
            w.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            let furthest = w.peek().expect("w is never empty here").0;
            if c.0 > furthest && w.len() >= ef {
                break;
            }
            let nbrs = &self.links[c.1 as usize][level];
            if let Some((rng, rho)) = noise.as_mut() {
                if !nbrs.is_empty() && rng.gen_bool(*rho) {
                    let decoy = nbrs[rng.gen_range(0..nbrs.len())];
                    std::hint::black_box(self.dist(q, decoy));
                    stats.visits += 1;
                    stats.decoys += 1;
                }
            }
            for &n in nbrs {
                if !visited.insert(n) {
                    continue;
                }
                let d = self.dist(q, n);
                stats.visits += 1;
                let furthest = w.peek().expect("non-empty").0;
                if w.len() < ef || d < furthest {
                    candidates.push(Reverse(Scored(d, n)));
                    w.push(Scored(d, n));
                    if w.len() > ef {
                        w.pop();
                    }
                }
            }
        }
        let mut out = w.into_vec();
        out.sort();
        out
    }

    /// Top `k` by cosine similarity, best first, ties by id.
    pub fn search(&self, q: &[f32], k: usize, ef: usize, rho: f64, rng: &mut StdRng) -> Result<(Vec<(String, f64)>, SearchStats)> {
        self.check_dim(q)?;
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Domain(format!("noise rho {rho} outside [0, 1)")));
        }
        let mut stats = SearchStats::default();
        let Some(mut ep) = self.entry else { return Ok((Vec::new(), stats)) };
        for l in (1..=self.max_level()).rev() {
            ep = self.search_layer(q, &[ep], 1, l, Some((rng, rho)), &mut stats)[0].1;
        }
        let ef = ef.max(k) + self.deleted.len().min(ef.max(k));
        let w = self.search_layer(q, &[ep], ef, 0, Some((rng, rho)), &mut stats);
        let mut out: Vec<(String, f64)> = w
            .into_iter()
            .filter(|s| !self.deleted.contains(&s.1))
            .map(|s| (self.ids[s.1 as usize].clone(), 1.0 - s.0))
            .collect();
        sort_hits(&mut out);
        out.truncate(k);
        Ok((out, stats))
    }

    /// Brute-force cosine top `k`.
    pub fn exact(&self, q: &[f32], k: usize) -> Result<Vec<(String, f64)>> {
        self.check_dim(q)?;
        let mut out: Vec<(String, f64)> = (0..self.ids.len() as u32)
            .filter(|p| !self.deleted.contains(p))
            .map(|p| (self.ids[p as usize].clone(), cosine(q, &self.vectors[p as usize])))
            .collect();
        sort_hits(&mut out);
        out.truncate(k);
        Ok(out)
    }
}

pub fn sort_hits(v: &mut [(String, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect()
    }

    fn build(n: usize, d: usize) -> (Hnsw, Vec<Vec<f32>>) {
        let data = random_vectors(n, d, 7);
        let mut h = Hnsw::new(d, HnswParams::default(), 11);
        for (i, v) in data.iter().enumerate() {
            h.insert(&format!("v{i:04}"), v.clone()).unwrap();
        }
        (h, data)
    }

    /// Oracle written independently of the index: plain loop, own cosine.
    fn brute(data: &[Vec<f32>], q: &[f32], k: usize) -> Vec<String> {
        let mut s: Vec<(String, f64)> = data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
                let nv: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let nq: f64 = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                (format!("v{i:04}"), dot / (nv * nq))
            })
            .collect();
        s.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        s.into_iter().take(k).map(|x| x.0).collect()
    }

    #[test]
    fn full_ef_matches_brute_force() {
        let (h, data) = build(300, 32);
        let mut rng = StdRng::seed_from_u64(1);
        for q in random_vectors(30, 32, 99) {
            let (hits, _) = h.search(&q, 10, 300, 0.0, &mut rng).unwrap();
            let got: Vec<String> = hits.into_iter().map(|x| x.0).collect();
            assert_eq!(got, brute(&data, &q, 10));
        }
    }

    #[test]
    fn stored_vector_ranks_first() {
        let (h, data) = build(100, 16);
        let mut rng = StdRng::seed_from_u64(1);
        let (hits, _) = h.search(&data[42], 1, 64, 0.0, &mut rng).unwrap();
        assert_eq!(hits[0].0, "v0042");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_adds_visits_but_not_results() {
        let (h, _) = build(200, 16);
        let q = random_vectors(1, 16, 5).pop().unwrap();
        let (r0, s0) = h.search(&q, 10, 64, 0.0, &mut StdRng::seed_from_u64(3)).unwrap();
        let (r5, s5) = h.search(&q, 10, 64, 0.5, &mut StdRng::seed_from_u64(3)).unwrap();
        assert_eq!(r0, r5);
        assert!(s5.visits > s0.visits);
        assert_eq!(s0.decoys, 0);
        assert_eq!(s5.visits - s5.decoys, s0.visits);
    }

    #[test]
    fn mean_visits_non_decreasing_in_rho() {
        let (h, _) = build(200, 16);
        let qs = random_vectors(20, 16, 6);
        let mean = |rho: f64| {
            let mut rng = StdRng::seed_from_u64(8);
            qs.iter().map(|q| h.search(q, 5, 32, rho, &mut rng).unwrap().1.visits).sum::<usize>() as f64 / qs.len() as f64
        };
        let m: Vec<f64> = [0.0, 0.25, 0.5, 0.9].into_iter().map(mean).collect();
        assert!(m.windows(2).all(|w| w[0] <= w[1]), "{m:?}");
    }

    #[test]
    fn shape_and_domain_errors() {
        let (h, _) = build(10, 4);
        let mut rng = StdRng::seed_from_u64(0);
        assert!(matches!(h.search(&[1.0], 1, 8, 0.0, &mut rng), Err(Error::Shape { expected: 4, got: 1 })));
        assert!(matches!(h.search(&[1.0; 4], 1, 8, 1.0, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn deleted_vectors_never_returned() {
        let (mut h, data) = build(120, 8);
        assert!(h.remove("v0003"));
        let mut rng = StdRng::seed_from_u64(0);
        let (hits, _) = h.search(&data[3], 5, 120, 0.0, &mut rng).unwrap();
        assert!(hits.iter().all(|x| x.0 != "v0003"));
        assert!(!h.exact(&data[3], 200).unwrap().iter().any(|x| x.0 == "v0003"));
        h.insert("v0003", data[3].clone()).unwrap();
        assert_eq!(h.exact(&data[3], 1).unwrap()[0].0, "v0003");
    }
}
