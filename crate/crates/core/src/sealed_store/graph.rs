//! Degree-hiding adjacency storage.
//!
//! A node's neighbour list is written as `⌈max(d, 1) / B⌉` blocks of exactly
//! `B` fixed-width slots; unused slots hold dummy entries and longer lists
//! chain through a continuation flag. Every block file has the same size, so
//! the host learns at most the `⌈d / B⌉` class of a node.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::RngCore;

use crate::crypto::{self, BlockCipher, Hash32, Key32, Nonce12, TAG_LEN};
use crate::durable;
use crate::error::{Error, Result};

use super::{TraceEvent, WriteTrace};

pub const DEFAULT_SLOTS: usize = 16;
/// Bytes per slot: a tag byte, a length byte and up to 94 id bytes.
pub const SLOT_WIDTH: usize = 96;
pub const MAX_ID_LEN: usize = SLOT_WIDTH - 2;

const HEADER: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphBlock {
    pub node_id: String,
    pub index: u32,
    /// Exactly `B` slots; `None` marks a dummy.
    pub entries: Vec<Option<String>>,
    pub continuation: Option<u32>,
}

impl GraphBlock {
    pub fn real(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter_map(|e| e.as_deref())
    }
}

/// Splits a neighbour list into padded blocks. Pure; no I/O.
pub fn layout(node_id: &str, neighbors: &[String], slots: usize) -> Result<Vec<GraphBlock>> {
    assert!(slots > 0);
    if let Some(long) = neighbors.iter().find(|n| n.len() > MAX_ID_LEN) {
        return Err(Error::InvalidInput(format!("neighbour id of {} bytes exceeds the {MAX_ID_LEN}-byte slot", long.len())));
    }
    let n_blocks = neighbors.len().max(1).div_ceil(slots);
    Ok((0..n_blocks)
        .map(|b| {
            let mut entries: Vec<Option<String>> = neighbors.iter().skip(b * slots).take(slots).cloned().map(Some).collect();
            entries.resize(slots, None);
            GraphBlock {
                node_id: node_id.to_string(),
                index: b as u32,
                entries,
                continuation: (b + 1 < n_blocks).then_some(b as u32 + 1),
            }
        })
        .collect())
}

pub struct GraphStore {
    dir: PathBuf,
    key: Key32,
    salt: Key32,
    slots: usize,
    cipher: Arc<dyn BlockCipher>,
    trace: Mutex<Option<WriteTrace>>,
}

impl GraphStore {
    pub fn new(dir: impl Into<PathBuf>, key: Key32, salt: Key32, slots: usize, cipher: Arc<dyn BlockCipher>) -> Self {
        Self { dir: dir.into(), key, salt, slots, cipher, trace: Mutex::new(None) }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn set_trace(&self, trace: Option<WriteTrace>) {
        *self.trace.lock() = trace;
    }

    /// Size of every block file.
    pub fn block_file_len(&self) -> usize {
        12 + HEADER + self.slots * SLOT_WIDTH + TAG_LEN
    }

    pub fn node_hash(&self, node_id: &str) -> Hash32 {
        crypto::sha256_parts(&[b"node", &self.salt, node_id.as_bytes()])
    }

    pub fn node_dir(&self, node_id: &str) -> PathBuf {
        self.dir.join(hex::encode(self.node_hash(node_id)))
    }

    pub fn store_adjacency(&self, node_id: &str, neighbors: &[String]) -> Result<Vec<GraphBlock>> {
        let blocks = layout(node_id, neighbors, self.slots)?;
        let h = self.node_hash(node_id);
        let dir = self.node_dir(node_id);
        fs::create_dir_all(&dir).map_err(Error::DurableWrite)?;
        for b in &blocks {
            let pt = self.encode(b);
            let nonce: Nonce12 = crypto::random_bytes();
            let mut bytes = nonce.to_vec();
            bytes.extend(self.cipher.encrypt(&self.key, &nonce, &aad(&h, b.index), &pt));
            let path = dir.join(format!("{}.gblk", b.index));
            durable::atomic_write(&path, &bytes)?;
            if let Some(t) = self.trace.lock().as_ref() {
                t.lock().push(TraceEvent::BlockWrite { path: rel(&self.dir, &path), size: bytes.len() });
            }
        }
        // Drop blocks left over from a longer previous list.
        let mut i = blocks.len();
        while dir.join(format!("{i}.gblk")).exists() {
            fs::remove_file(dir.join(format!("{i}.gblk"))).map_err(Error::DurableWrite)?;
            i += 1;
        }
        Ok(blocks)
    }

    /// Real neighbours in stored order. A node never stored has none.
    pub fn load_adjacency(&self, node_id: &str) -> Result<Vec<String>> {
        Ok(self.load_blocks(node_id)?.iter().flat_map(|b| b.real().map(str::to_string).collect::<Vec<_>>()).collect())
    }

    pub fn load_blocks(&self, node_id: &str) -> Result<Vec<GraphBlock>> {
        let h = self.node_hash(node_id);
        let dir = self.node_dir(node_id);
        let mut out = Vec::new();
        let mut next = Some(0u32);
        while let Some(i) = next {
            let path = dir.join(format!("{i}.gblk"));
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound && i == 0 => return Ok(out),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(Error::Tamper(format!("graph chain for a node breaks at block {i}")))
                }
                Err(e) => return Err(e.into()),
            };
            if bytes.len() != self.block_file_len() {
                return Err(Error::Integrity("graph block has wrong length".into()));
            }
            let nonce: Nonce12 = bytes[..12].try_into().expect("12");
            let pt = self.cipher.decrypt(&self.key, &nonce, &aad(&h, i), &bytes[12..])?;
            let block = self.decode(node_id, i, &pt)?;
            next = block.continuation;
            out.push(block);
        }
        Ok(out)
    }

    fn encode(&self, b: &GraphBlock) -> Vec<u8> {
        let mut rng = rand::thread_rng();
        let mut pt = Vec::with_capacity(HEADER + self.slots * SLOT_WIDTH);
        pt.push(u8::from(b.continuation.is_some()));
        for e in &b.entries {
            let mut slot = [0u8; SLOT_WIDTH];
            match e {
                Some(id) => {
                    slot[0] = 1;
                    slot[1] = id.len() as u8;
                    slot[2..2 + id.len()].copy_from_slice(id.as_bytes());
                }
                None => {
                    rng.fill_bytes(&mut slot[1..]);
                    slot[0] = 0;
                }
            }
            pt.extend_from_slice(&slot);
        }
        pt
    }

    fn decode(&self, node_id: &str, index: u32, pt: &[u8]) -> Result<GraphBlock> {
        let bad = || Error::Integrity("graph block plaintext is malformed".into());
        if pt.len() != HEADER + self.slots * SLOT_WIDTH {
            return Err(bad());
        }
        let entries = pt[HEADER..]
            .chunks(SLOT_WIDTH)
            .map(|slot| match slot[0] {
                0 => Ok(None),
                1 => {
                    let len = slot[1] as usize;
                    let id = slot.get(2..2 + len).ok_or_else(bad)?;
                    Ok(Some(String::from_utf8(id.to_vec()).map_err(|_| bad())?))
                }
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphBlock {
            node_id: node_id.to_string(),
            index,
            entries,
            continuation: (pt[0] == 1).then_some(index + 1),
        })
    }
}

fn aad(h: &Hash32, i: u32) -> Vec<u8> {
    let mut a = b"gblk".to_vec();
    a.extend_from_slice(h);
    a.extend_from_slice(&i.to_be_bytes());
    a
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::AesGcm;
    use proptest::prelude::*;

    fn store(dir: &Path) -> GraphStore {
        GraphStore::new(dir.join("graph"), [9; 32], [8; 32], DEFAULT_SLOTS, Arc::new(AesGcm))
    }

    fn ids(n: usize, tag: &str) -> Vec<String> {
        (0..n).map(|i| format!("{tag}-{i}")).collect()
    }

    fn sizes(dir: &Path) -> Vec<u64> {
        let mut v: Vec<u64> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().metadata().unwrap().len()).collect();
        v.sort();
        v
    }

    #[test]
    fn degree_two_fills_one_block_with_fourteen_dummies() {
        let blocks = layout("n", &ids(2, "x"), 16).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].entries.iter().filter(|e| e.is_none()).count(), 14);
        assert_eq!(blocks[0].continuation, None);
    }

    #[test]
    fn isolated_node_still_gets_a_block() {
        let blocks = layout("n", &[], 16).unwrap();
        assert_eq!(blocks.len(), 1);
        assert!(blocks[0].entries.iter().all(Option::is_none));
    }

    #[test]
    fn degree_2_versus_100_block_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let g = store(dir.path());
        g.store_adjacency("small", &ids(2, "s")).unwrap();
        g.store_adjacency("hub", &ids(100, "h")).unwrap();
        let s = g.block_file_len() as u64;
        assert_eq!(sizes(&g.node_dir("small")), vec![s]);
        assert_eq!(sizes(&g.node_dir("hub")), vec![s; 7]);
    }

    #[test]
    fn round_trip_and_shrink() {
        let dir = tempfile::tempdir().unwrap();
        let g = store(dir.path());
        g.store_adjacency("n", &ids(40, "a")).unwrap();
        assert_eq!(g.load_adjacency("n").unwrap(), ids(40, "a"));
        g.store_adjacency("n", &ids(3, "b")).unwrap();
        assert_eq!(g.load_adjacency("n").unwrap(), ids(3, "b"));
        assert_eq!(fs::read_dir(g.node_dir("n")).unwrap().count(), 1);
        assert!(g.load_adjacency("never").unwrap().is_empty());
    }

    #[test]
    fn oversized_id_rejected() {
        assert!(matches!(layout("n", &["x".repeat(MAX_ID_LEN + 1)], 16), Err(Error::InvalidInput(_))));
        assert!(layout("n", &["x".repeat(MAX_ID_LEN)], 16).is_ok());
    }

    #[test]
    fn tampered_block_fails() {
        let dir = tempfile::tempdir().unwrap();
        let g = store(dir.path());
        g.store_adjacency("n", &ids(20, "a")).unwrap();
        let p = g.node_dir("n").join("1.gblk");
        let mut b = fs::read(&p).unwrap();
        b[40] ^= 0x80;
        fs::write(&p, b).unwrap();
        assert!(matches!(g.load_adjacency("n"), Err(Error::Integrity(_))));
        fs::remove_file(&p).unwrap();
        assert!(matches!(g.load_adjacency("n"), Err(Error::Tamper(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn same_class_same_artifacts(d1 in 0usize..80, d2 in 0usize..80) {
            let c = |d: usize| d.max(1).div_ceil(DEFAULT_SLOTS);
            let dir = tempfile::tempdir().unwrap();
            let g = store(dir.path());
            g.store_adjacency("a", &ids(d1, "p")).unwrap();
            g.store_adjacency("b", &ids(d2, "q")).unwrap();
            prop_assert_eq!(g.load_adjacency("a").unwrap(), ids(d1, "p"));
            let (sa, sb) = (sizes(&g.node_dir("a")), sizes(&g.node_dir("b")));
            prop_assert_eq!(sa == sb, c(d1) == c(d2));
        }
    }
}
