//! Hot/cold vector segments.
//!
//! A hot segment lives decrypted in memory; a cold one exists only as a
//! sealed file under `store/segments/`. The hot set is bounded by a segment
//! budget and evicts least-recently-used first.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::tee_sim::SharedEnclave;

/// Width of the fixed id field inside an encoded segment.
pub const SEGMENT_ID_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Temperature {
    Hot,
    Cold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentEntry {
    pub vector_id: String,
    pub vector: Vec<f32>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorSegment {
    pub segment_id: String,
    pub dim: usize,
    pub entries: Vec<SegmentEntry>,
}

impl VectorSegment {
    pub fn new(segment_id: impl Into<String>, dim: usize) -> Self {
        Self { segment_id: segment_id.into(), dim, entries: Vec::new() }
    }

    /// Fixed-width layout: header, then for each entry a 64-byte id field,
    /// `dim` little-endian f32s and a length-prefixed payload.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.dim as u32).to_be_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            if e.vector_id.len() >= SEGMENT_ID_WIDTH {
                return Err(Error::InvalidInput(format!("vector id {} is too long for a segment", e.vector_id)));
            }
            if e.vector.len() != self.dim {
                return Err(Error::Shape { expected: self.dim, got: e.vector.len() });
            }
            let mut id = [0u8; SEGMENT_ID_WIDTH];
            id[0] = e.vector_id.len() as u8;
            id[1..1 + e.vector_id.len()].copy_from_slice(e.vector_id.as_bytes());
            out.extend_from_slice(&id);
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&(e.payload.len() as u32).to_be_bytes());
            out.extend_from_slice(&e.payload);
        }
        Ok(out)
    }

    pub fn decode(segment_id: &str, bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Integrity(format!("segment {segment_id} is malformed"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        let dim = u32::from_be_bytes(take(4)?.try_into().expect("4")) as usize;
        let n = u32::from_be_bytes(take(4)?.try_into().expect("4")) as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let id = take(SEGMENT_ID_WIDTH)?;
            let len = id[0] as usize;
            let vector_id = String::from_utf8(id.get(1..1 + len).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
            let vector = take(dim * 4)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            let plen = u32::from_be_bytes(take(4)?.try_into().expect("4")) as usize;
            let payload = take(plen)?.to_vec();
            entries.push(SegmentEntry { vector_id, vector, payload });
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Ok(Self { segment_id: segment_id.to_string(), dim, entries })
    }
}

struct Hot {
    map: HashMap<String, Arc<VectorSegment>>,
    order: VecDeque<String>,
}

impl Hot {
    fn touch(&mut self, id: &str) {
        if let Some(pos) = self.order.iter().position(|x| x == id) {
            self.order.remove(pos);
        }
        self.order.push_back(id.to_string());
    }
}

pub struct SegmentCache {
    dir: PathBuf,
    enclave: SharedEnclave,
    budget: usize,
    hot: Mutex<Hot>,
}

impl SegmentCache {
    pub fn new(dir: impl Into<PathBuf>, enclave: SharedEnclave, budget: usize) -> Self {
        Self { dir: dir.into(), enclave, budget, hot: Mutex::new(Hot { map: HashMap::new(), order: VecDeque::new() }) }
    }

    pub fn path(&self, segment_id: &str) -> Result<PathBuf> {
        if segment_id.is_empty() || !segment_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
            return Err(Error::InvalidInput(format!("bad segment id {segment_id:?}")));
        }
        Ok(self.dir.join(format!("{segment_id}.seg")))
    }

    /// Seals `seg` to disk and makes it hot.
    pub fn insert(&self, seg: VectorSegment) -> Result<()> {
        self.write_sealed(&seg)?;
        let mut hot = self.hot.lock();
        let id = seg.segment_id.clone();
        hot.map.insert(id.clone(), Arc::new(seg));
        hot.touch(&id);
        self.enforce_budget(&mut hot)
    }

    /// Seals `seg` to disk without making it hot. A hot copy is replaced.
    pub fn store_cold(&self, seg: &VectorSegment) -> Result<()> {
        self.write_sealed(seg)?;
        let mut hot = self.hot.lock();
        if hot.map.contains_key(&seg.segment_id) {
            hot.map.insert(seg.segment_id.clone(), Arc::new(seg.clone()));
        }
        Ok(())
    }

    /// Returns the segment, unsealing it into the hot set if it was cold.
    pub fn load_segment(&self, segment_id: &str) -> Result<Arc<VectorSegment>> {
        let mut hot = self.hot.lock();
        if let Some(seg) = hot.map.get(segment_id).cloned() {
            hot.touch(segment_id);
            return Ok(seg);
        }
        let (seg, _) = self.read_sealed(segment_id)?;
        let seg = Arc::new(seg);
        hot.map.insert(segment_id.to_string(), seg.clone());
        hot.touch(segment_id);
        self.enforce_budget(&mut hot)?;
        Ok(seg)
    }

    pub fn evict_segment(&self, segment_id: &str) -> Result<()> {
        let mut hot = self.hot.lock();
        self.evict_locked(&mut hot, segment_id)
    }

    fn evict_locked(&self, hot: &mut Hot, segment_id: &str) -> Result<()> {
        if let Some(seg) = hot.map.remove(segment_id) {
            hot.order.retain(|x| x != segment_id);
            self.write_sealed(&seg)?;
        }
        Ok(())
    }

    fn enforce_budget(&self, hot: &mut Hot) -> Result<()> {
        while hot.map.len() > self.budget {
            let victim = hot.order.front().cloned().expect("order tracks map");
            self.evict_locked(hot, &victim)?;
        }
        Ok(())
    }

    pub fn temperature(&self, segment_id: &str) -> Option<Temperature> {
        if self.hot.lock().map.contains_key(segment_id) {
            Some(Temperature::Hot)
        } else if self.path(segment_id).map_or(false, |p| p.exists()) {
            Some(Temperature::Cold)
        } else {
            None
        }
    }

    pub fn hot_ids(&self) -> Vec<String> {
        self.hot.lock().order.iter().cloned().collect()
    }

    /// Reads and unseals a segment straight from disk without touching the
    /// hot set. Returns the segment and the number of sealed bytes read.
    pub fn read_sealed(&self, segment_id: &str) -> Result<(VectorSegment, usize)> {
        let path = self.path(segment_id)?;
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("segment {segment_id}")),
            _ => e.into(),
        })?;
        let plain = self.enclave.unseal(&crate::tee_sim::SealedBlob::from_bytes(&bytes)?)?;
        Ok((VectorSegment::decode(segment_id, &plain)?, bytes.len()))
    }

    fn write_sealed(&self, seg: &VectorSegment) -> Result<()> {
        let path = self.path(&seg.segment_id)?;
        fs::create_dir_all(&self.dir).map_err(Error::DurableWrite)?;
        self.enclave.seal_to_file(&path, &seg.encode()?)
    }
}
