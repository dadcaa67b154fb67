//! Fixed-capacity vector buckets and k-anonymous bucket fetching.
//!
//! Vectors are assigned to buckets in insertion order, 64 per bucket. Each
//! bucket is kept as a sealed segment padded with random dummy vectors, so
//! every bucket file has the same size. A fetch for one real bucket reads
//! `k` distinct buckets in shuffled order.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::sealed_store::segments::{SegmentCache, SegmentEntry, VectorSegment};

pub const BUCKET_CAPACITY: usize = 64;
pub const DUMMY_PREFIX: &str = "~dummy";

pub type FetchTrace = Arc<Mutex<Vec<String>>>;

#[derive(Clone, Debug)]
pub struct FetchResult {
    /// Bucket ids in the order they were read.
    pub order: Vec<usize>,
    /// Position of the real bucket within `order`.
    pub real_position: usize,
    pub bytes_read: usize,
    /// Real entries of the real bucket, dummies dropped.
    pub entries: Vec<SegmentEntry>,
}

pub struct BucketStore {
    cache: Arc<SegmentCache>,
    dim: usize,
    /// vector id → (bucket, slot)
    slots: HashMap<String, (usize, usize)>,
    buckets: Vec<Vec<Option<SegmentEntry>>>,
    next: usize,
    trace: Option<FetchTrace>,
}

fn segment_id(bucket: usize) -> String {
    format!("bucket-{bucket:06}")
}

impl BucketStore {
    pub fn new(cache: Arc<SegmentCache>, dim: usize) -> Self {
        Self { cache, dim, slots: HashMap::new(), buckets: Vec::new(), next: 0, trace: None }
    }

    pub fn set_trace(&mut self, trace: Option<FetchTrace>) {
        self.trace = trace;
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket_of(&self, vector_id: &str) -> Option<usize> {
        self.slots.get(vector_id).map(|s| s.0)
    }

    /// Places a vector in the next free slot and reseals its bucket.
    pub fn insert(&mut self, vector_id: &str, vector: Vec<f32>, rng: &mut StdRng) -> Result<usize> {
        if vector.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: vector.len() });
        }
        if vector_id.starts_with(DUMMY_PREFIX) {
            return Err(Error::InvalidInput("vector ids may not use the dummy prefix".into()));
        }
        if self.slots.contains_key(vector_id) {
            return Err(Error::InvalidInput(format!("vector {vector_id} already bucketed")));
        }
        let (b, s) = (self.next / BUCKET_CAPACITY, self.next % BUCKET_CAPACITY);
        if b == self.buckets.len() {
            self.buckets.push(vec![None; BUCKET_CAPACITY]);
        }
        self.buckets[b][s] = Some(SegmentEntry { vector_id: vector_id.to_string(), vector, payload: Vec::new() });
        self.slots.insert(vector_id.to_string(), (b, s));
        self.next += 1;
        self.flush(b, rng)?;
        Ok(b)
    }

    /// Replaces a vector's slot with a dummy.
    pub fn remove(&mut self, vector_id: &str, rng: &mut StdRng) -> Result<bool> {
        let Some((b, s)) = self.slots.remove(vector_id) else { return Ok(false) };
        self.buckets[b][s] = None;
        self.flush(b, rng)?;
        Ok(true)
    }

    fn flush(&self, b: usize, rng: &mut StdRng) -> Result<()> {
        let mut seg = VectorSegment::new(segment_id(b), self.dim);
        for (slot, e) in self.buckets[b].iter().enumerate() {
            seg.entries.push(match e {
                Some(e) => e.clone(),
                None => SegmentEntry {
                    vector_id: format!("{DUMMY_PREFIX}-{b:06}-{slot:02}"),
                    vector: (0..self.dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                    payload: Vec::new(),
                },
            });
        }
        self.cache.store_cold(&seg)
    }

    /// Reads the real bucket and `k - 1` distinct others, chosen uniformly
    /// and read in a uniformly shuffled order. `k` above the bucket count
    /// reads every bucket.
    pub fn oblivious_fetch(&self, real: usize, k: usize, query_id: &str, rng: &mut StdRng) -> Result<FetchResult> {
        let n = self.buckets.len();
        if real >= n {
            return Err(Error::NotFound(format!("bucket {real}")));
        }
        if k == 0 {
            return Err(Error::Domain("k-anonymity must be at least 1".into()));
        }
        let k = k.min(n);
        let others: Vec<usize> = (0..n).filter(|&b| b != real).collect();
        let mut order: Vec<usize> = others.choose_multiple(rng, k - 1).copied().collect();
        order.push(real);
        order.shuffle(rng);
        let mut bytes_read = 0;
        let mut entries = Vec::new();
        for &b in &order {
            if let Some(t) = &self.trace {
                t.lock().push(format!("fetch bucket={b} query={query_id}"));
            }
            let (seg, len) = self.cache.read_sealed(&segment_id(b))?;
            bytes_read += len;
            if b == real {
                entries = seg.entries.into_iter().filter(|e| !e.vector_id.starts_with(DUMMY_PREFIX)).collect();
            }
        }
        let real_position = order.iter().position(|&b| b == real).expect("real bucket is in the order");
        Ok(FetchResult { order, real_position, bytes_read, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MockClock;
    use crate::tee_sim::{Enclave, PlatformKey};
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn store(dir: &std::path::Path, n: usize) -> BucketStore {
        let enclave = Arc::new(Enclave::launch(PlatformKey::from_secret([5; 32]), b"c", b"p", Arc::new(MockClock::new(0))));
        let cache = Arc::new(SegmentCache::new(dir.join("segments"), enclave, 4));
        let mut bs = BucketStore::new(cache, 8);
        let mut rng = StdRng::seed_from_u64(1);
        for i in 0..n {
            bs.insert(&format!("ep-{i:05}"), vec![i as f32; 8], &mut rng).unwrap();
        }
        bs
    }

    #[test]
    fn partition_and_padding() {
        let dir = tempfile::tempdir().unwrap();
        let bs = store(dir.path(), 130);
        assert_eq!(bs.bucket_count(), 3);
        assert_eq!(bs.bucket_of("ep-00063"), Some(0));
        assert_eq!(bs.bucket_of("ep-00064"), Some(1));
        let sizes: HashSet<u64> = (0..3)
            .map(|b| std::fs::metadata(dir.path().join("segments").join(format!("{}.seg", segment_id(b)))).unwrap().len())
            .collect();
        assert_eq!(sizes.len(), 1, "every bucket file has one size");
    }

    #[test]
    fn k_one_fetches_only_the_real_bucket() {
        let dir = tempfile::tempdir().unwrap();
        let bs = store(dir.path(), 200);
        let mut rng = StdRng::seed_from_u64(2);
        let r = bs.oblivious_fetch(1, 1, "q", &mut rng).unwrap();
        assert_eq!(r.order, vec![1]);
        assert_eq!(r.entries.len(), 64);
        assert!(r.entries.iter().all(|e| !e.vector_id.starts_with(DUMMY_PREFIX)));
    }

    #[test]
    fn fetch_is_distinct_and_capped() {
        let dir = tempfile::tempdir().unwrap();
        let bs = store(dir.path(), 200);
        let mut rng = StdRng::seed_from_u64(3);
        let r = bs.oblivious_fetch(3, 3, "q", &mut rng).unwrap();
        assert_eq!(r.order.iter().collect::<HashSet<_>>().len(), 3);
        assert_eq!(r.entries.len(), 200 - 192);
        let all = bs.oblivious_fetch(0, 99, "q", &mut rng).unwrap();
        assert_eq!(all.order.len(), 4);
    }

    #[test]
    fn removal_leaves_a_dummy_and_keeps_size() {
        let dir = tempfile::tempdir().unwrap();
        let mut bs = store(dir.path(), 10);
        let path = dir.path().join("segments").join(format!("{}.seg", segment_id(0)));
        let before = std::fs::metadata(&path).unwrap().len();
        let mut rng = StdRng::seed_from_u64(4);
        assert!(bs.remove("ep-00004", &mut rng).unwrap());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), before);
        let r = bs.oblivious_fetch(0, 1, "q", &mut rng).unwrap();
        assert_eq!(r.entries.len(), 9);
    }

    #[test]
    fn trace_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut bs = store(dir.path(), 130);
        let t: FetchTrace = Default::default();
        bs.set_trace(Some(t.clone()));
        let mut rng = StdRng::seed_from_u64(5);
        bs.oblivious_fetch(2, 2, "q7", &mut rng).unwrap();
        let lines = t.lock().clone();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.starts_with("fetch bucket=") && l.ends_with(" query=q7")));
        assert!(lines.contains(&"fetch bucket=2 query=q7".to_string()));
    }
}
