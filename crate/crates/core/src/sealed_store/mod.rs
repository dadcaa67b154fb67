//! Sealed object store.
//!
//! Objects are cut into 4096-byte plaintext blocks (a 4-byte length prefix
//! and up to 4092 data bytes, zero padded) and each block is encrypted under
//! the owning unit's DUK. Every block file is a Merkle leaf; the root and the
//! commit counter are sealed to `root.sealed` and anchored to a
//! [`MonotonicCounter`], so restoring an older copy of the store is caught on
//! the next read.
//!
//! Writes go through a single committer. One commit writes its blocks, then
//! the sealed index, then the sealed root, and only then bumps the counter;
//! readers hold the state lock for the whole read and so never see a root
//! that is not yet sealed.
//!
//! On disk:
//!
//! ```text
//! store/<unit-hash>/<i>.blk        nonce ‖ ciphertext ‖ tag
//! store/cold/<unit-hash>/<i>.blk   demoted units
//! store/root.sealed                root ‖ counter
//! store/index.sealed               per-unit metadata and leaf hashes
//! store/graph/<node-hash>/<i>.gblk
//! store/segments/<id>.seg
//! ```

pub mod graph;
pub mod merkle;
pub mod segments;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::crypto::{self, BlockCipher, Hash32, Key32, Nonce12, TAG_LEN};
use crate::durable;
use crate::error::{Error, Result};
use crate::keyvault::SharedVault;
use crate::tee_sim::{MonotonicCounter, SharedEnclave};

use merkle::MerkleTree;

pub const BLOCK_PLAINTEXT: usize = 4096;
pub const BLOCK_DATA: usize = BLOCK_PLAINTEXT - 4;
pub const BLOCK_FILE_LEN: usize = 12 + BLOCK_PLAINTEXT + TAG_LEN;
pub const MAX_OBJECT_LEN: usize = 16 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hot,
    Cold,
}

/// What an object holds. Only visible inside the sealed index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Data,
    Chaff,
    /// Blocks re-encrypted under a discarded key.
    Garbage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectHandle {
    pub unit_id: String,
    pub tier: Tier,
    pub block_count: u32,
    pub epoch: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    BlockWrite { path: String, size: usize },
    BlockRemove { path: String },
    ObjectPut,
    Commit { counter: u64 },
}

pub type WriteTrace = Arc<Mutex<Vec<TraceEvent>>>;

pub struct PutRequest {
    pub unit_id: String,
    pub data: Vec<u8>,
    pub kind: ObjectKind,
}

impl PutRequest {
    pub fn data(unit_id: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        Self { unit_id: unit_id.into(), data: data.into(), kind: ObjectKind::Data }
    }

    pub fn chaff(unit_id: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        Self { unit_id: unit_id.into(), data: data.into(), kind: ObjectKind::Chaff }
    }
}

/// What a rewrite pass should do with a live data unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disposition {
    Keep(Tier),
    Destroy,
}

pub struct UnitInfo<'a> {
    pub unit_id: &'a str,
    pub tier: Tier,
    pub len: u64,
    pub blocks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RewriteReport {
    pub units: usize,
    pub blocks_rewritten: usize,
    pub demoted: usize,
    pub promoted: usize,
    pub destroyed: usize,
}

#[derive(Clone, Debug)]
struct UnitMeta {
    unit_id: String,
    kind: ObjectKind,
    tier: Tier,
    epoch: u64,
    len: u64,
    leaves: Vec<Hash32>,
}

#[derive(Default)]
struct State {
    units: BTreeMap<Hash32, UnitMeta>,
    tree: MerkleTree,
    offsets: HashMap<Hash32, usize>,
    counter: u64,
    fault: Option<Fault>,
}

#[derive(Clone, Debug)]
enum Fault {
    Rollback { sealed: u64, current: u64 },
    Tamper(String),
}

impl Fault {
    fn to_error(&self) -> Error {
        match self {
            Fault::Rollback { sealed, current } => Error::Rollback { sealed: *sealed, current: *current },
            Fault::Tamper(m) => Error::Tamper(m.clone()),
        }
    }
}

impl State {
    fn rebuild(&mut self) {
        let mut leaves = Vec::new();
        self.offsets.clear();
        for (h, m) in &self.units {
            self.offsets.insert(*h, leaves.len());
            leaves.extend_from_slice(&m.leaves);
        }
        self.tree = MerkleTree::build(leaves);
    }
}

pub struct SealedStore {
    root: PathBuf,
    enclave: SharedEnclave,
    vault: SharedVault,
    counter: MonotonicCounter,
    cipher: Arc<dyn BlockCipher>,
    state: RwLock<State>,
    trace: Mutex<Option<WriteTrace>>,
}

const ROOT_FILE: &str = "root.sealed";
const INDEX_FILE: &str = "index.sealed";

impl SealedStore {
    /// Opens (or creates) the store rooted at `root`.
    ///
    /// A store whose sealed counter lags the monotonic counter opens in a
    /// faulted state: every later read or write returns the rollback error.
    pub fn open(
        root: impl Into<PathBuf>,
        enclave: SharedEnclave,
        vault: SharedVault,
        counter: MonotonicCounter,
        cipher: Arc<dyn BlockCipher>,
    ) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let store = Self { root, enclave, vault, counter, cipher, state: RwLock::new(State::default()), trace: Mutex::new(None) };
        store.load()?;
        Ok(store)
    }

    fn load(&self) -> Result<()> {
        let mut st = self.state.write();
        let tee = self.counter.read();
        let sealed_root = self.read_root()?;
        let index = match self.enclave.unseal_file(&self.root.join(INDEX_FILE))? {
            Some(bytes) => Some(decode_index(&bytes)?),
            None => None,
        };
        let (root_hash, root_counter) = sealed_root.unwrap_or((merkle::empty_root(), 0));
        let (units, index_counter) = index.unwrap_or_default();

        if root_counter < tee {
            st.fault = Some(Fault::Rollback { sealed: root_counter, current: tee });
            return Ok(());
        }
        st.units = units;
        st.rebuild();
        st.counter = root_counter;
        if index_counter == root_counter + 1 {
            // Crash between sealing the index and sealing the root: the index
            // is authentic and newer, finish that commit.
            st.counter = index_counter;
            self.write_root(&st.tree.root(), index_counter)?;
        } else if st.tree.root() != root_hash || index_counter != root_counter {
            st.fault = Some(Fault::Tamper("sealed index does not match sealed root".into()));
            return Ok(());
        }
        while self.counter.read() < st.counter {
            // Crash after sealing but before the counter bump.
            self.counter.increment()?;
        }
        // Burn one counter value so a crashed, unacknowledged write can never
        // have its nonces reused.
        let next = st.counter + 1;
        self.persist(&st, next)?;
        self.counter.increment()?;
        st.counter = next;
        Ok(())
    }

    pub fn root_dir(&self) -> &Path {
        &self.root
    }

    pub fn vault(&self) -> &SharedVault {
        &self.vault
    }

    pub fn set_trace(&self, trace: Option<WriteTrace>) {
        *self.trace.lock() = trace;
    }

    fn emit(&self, ev: TraceEvent) {
        if let Some(t) = self.trace.lock().as_ref() {
            t.lock().push(ev);
        }
    }

    pub fn counter(&self) -> u64 {
        self.state.read().counter
    }

    pub fn merkle_root(&self) -> Hash32 {
        self.state.read().tree.root()
    }

    pub fn total_blocks(&self) -> usize {
        self.state.read().tree.len()
    }

    pub fn handle(&self, unit_id: &str) -> Option<ObjectHandle> {
        let st = self.state.read();
        let m = st.units.get(&self.vault.unit_hash(unit_id))?;
        (m.kind == ObjectKind::Data).then(|| handle_of(m))
    }

    /// Live data unit ids, in index order.
    pub fn data_units(&self) -> Vec<String> {
        let st = self.state.read();
        st.units.values().filter(|m| m.kind == ObjectKind::Data).map(|m| m.unit_id.clone()).collect()
    }

    pub fn count_kind(&self, kind: ObjectKind) -> usize {
        self.state.read().units.values().filter(|m| m.kind == kind).count()
    }

    /// Block files currently backing `unit_id`, data or not.
    pub fn block_paths(&self, unit_id: &str) -> Vec<PathBuf> {
        let h = self.vault.unit_hash(unit_id);
        let st = self.state.read();
        st.units
            .get(&h)
            .map(|m| (0..m.leaves.len()).map(|i| self.block_path(m.tier, &h, i)).collect())
            .unwrap_or_default()
    }

    fn block_path(&self, tier: Tier, h: &Hash32, i: usize) -> PathBuf {
        let dir = match tier {
            Tier::Hot => self.root.join(hex::encode(h)),
            Tier::Cold => self.root.join("cold").join(hex::encode(h)),
        };
        dir.join(format!("{i}.blk"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    pub fn put_object(&self, unit_id: &str, data: &[u8]) -> Result<ObjectHandle> {
        let mut hs = self.put_batch(vec![PutRequest::data(unit_id, data)])?;
        Ok(hs.pop().expect("one request, one handle"))
    }

    /// Writes every request and commits them under one counter value.
    pub fn put_batch(&self, requests: Vec<PutRequest>) -> Result<Vec<ObjectHandle>> {
        let mut st = self.state.write();
        self.check_fresh(&st)?;
        let epoch = self.vault.current_epoch();
        let next = st.counter + 1;
        let mut units = st.units.clone();
        let mut handles = Vec::with_capacity(requests.len());
        let mut seen = std::collections::HashSet::new();
        for req in &requests {
            if req.data.len() > MAX_OBJECT_LEN {
                return Err(Error::InvalidInput(format!("object of {} bytes exceeds the 16 MiB limit", req.data.len())));
            }
            if !seen.insert(req.unit_id.as_str()) {
                return Err(Error::InvalidInput(format!("unit {} appears twice in one batch", req.unit_id)));
            }
        }
        for req in requests {
            let key = self.vault.derive_duk(&req.unit_id, epoch)?.key;
            let h = self.vault.unit_hash(&req.unit_id);
            let old = units.get(&h).cloned();
            let mut leaves = Vec::new();
            let chunks: Vec<&[u8]> = if req.data.is_empty() { vec![&[][..]] } else { req.data.chunks(BLOCK_DATA).collect() };
            for (i, chunk) in chunks.iter().enumerate() {
                let pt = frame_block(chunk);
                let bytes = self.seal_block(&key, &h, i, next, &pt);
                leaves.push(self.write_block(&self.block_path(Tier::Hot, &h, i), &bytes)?);
            }
            if let Some(old) = &old {
                for i in 0..old.leaves.len() {
                    if old.tier != Tier::Hot || i >= leaves.len() {
                        self.remove_block(&self.block_path(old.tier, &h, i))?;
                    }
                }
            }
            let meta = UnitMeta { unit_id: req.unit_id, kind: req.kind, tier: Tier::Hot, epoch, len: req.data.len() as u64, leaves };
            handles.push(handle_of(&meta));
            units.insert(h, meta);
            self.emit(TraceEvent::ObjectPut);
        }
        self.commit(&mut st, units, next)?;
        Ok(handles)
    }

    pub fn get_object(&self, handle: &ObjectHandle) -> Result<Vec<u8>> {
        self.get_unit(&handle.unit_id)
    }

    pub fn get_unit(&self, unit_id: &str) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.read_stream(unit_id, |chunk| {
            out.extend_from_slice(chunk);
            Ok(())
        })?;
        Ok(out)
    }

    /// Streams an object one verified block at a time.
    pub fn read_stream(&self, unit_id: &str, mut sink: impl FnMut(&[u8]) -> Result<()>) -> Result<()> {
        let st = self.state.read();
        self.check_fresh(&st)?;
        let h = self.vault.unit_hash(unit_id);
        let meta = st
            .units
            .get(&h)
            .filter(|m| m.kind == ObjectKind::Data)
            .ok_or_else(|| Error::NotFound(format!("unit {unit_id}")))?;
        let key = self.vault.derive_duk(unit_id, meta.epoch)?.key;
        let base = st.offsets[&h];
        let root = st.tree.root();
        for i in 0..meta.leaves.len() {
            let pt = self.open_block(&key, &h, i, &self.block_path(meta.tier, &h, i), &st.tree, base + i, &root)?;
            sink(unframe_block(&pt)?)?;
        }
        Ok(())
    }

    /// Reads and authenticates one block: AEAD first, then the Merkle path.
    #[allow(clippy::too_many_arguments)]
    fn open_block(
        &self,
        key: &Key32,
        h: &Hash32,
        i: usize,
        path: &Path,
        tree: &MerkleTree,
        leaf_index: usize,
        root: &Hash32,
    ) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Tamper(format!("block {} missing", self.rel(path))),
            _ => e.into(),
        })?;
        if bytes.len() != BLOCK_FILE_LEN {
            return Err(Error::Integrity(format!("block {} has length {}", self.rel(path), bytes.len())));
        }
        let nonce: Nonce12 = bytes[..12].try_into().expect("12");
        let pt = self.cipher.decrypt(key, &nonce, &block_aad(h, i), &bytes[12..])?;
        let proof = tree.proof(leaf_index).ok_or_else(|| Error::Tamper("leaf outside tree".into()))?;
        if !merkle::verify_proof(&merkle::leaf_hash(&bytes), &proof, root) {
            return Err(Error::Tamper(format!("block {} not under sealed root", self.rel(path))));
        }
        Ok(pt)
    }

    /// Rewrites every block in the store exactly once under the vault's
    /// current epoch. Data units are kept or destroyed per `decide`; shredded
    /// units, chaff and garbage are always overwritten under a throwaway key.
    pub fn rewrite_all(&self, decide: impl Fn(&UnitInfo<'_>) -> Disposition) -> Result<RewriteReport> {
        let mut st = self.state.write();
        self.check_fresh(&st)?;
        let epoch = self.vault.current_epoch();
        let next = st.counter + 1;
        let root = st.tree.root();
        let mut units = st.units.clone();
        let mut report = RewriteReport::default();
        for (h, meta) in units.iter_mut() {
            report.units += 1;
            let disposition = if meta.kind != ObjectKind::Data || self.vault.is_shredded(&meta.unit_id) {
                Disposition::Destroy
            } else {
                decide(&UnitInfo { unit_id: &meta.unit_id, tier: meta.tier, len: meta.len, blocks: meta.leaves.len() })
            };
            let base = st.offsets[h];
            match disposition {
                Disposition::Keep(tier) => {
                    let old_key = self.vault.derive_duk(&meta.unit_id, meta.epoch)?.key;
                    let new_key = self.vault.derive_duk(&meta.unit_id, epoch)?.key;
                    for i in 0..meta.leaves.len() {
                        let from = self.block_path(meta.tier, h, i);
                        let pt = self.open_block(&old_key, h, i, &from, &st.tree, base + i, &root)?;
                        let bytes = self.seal_block(&new_key, h, i, next, &pt);
                        let to = self.block_path(tier, h, i);
                        meta.leaves[i] = self.write_block(&to, &bytes)?;
                        if to != from {
                            self.remove_block(&from)?;
                        }
                    }
                    match (meta.tier, tier) {
                        (Tier::Hot, Tier::Cold) => report.demoted += 1,
                        (Tier::Cold, Tier::Hot) => report.promoted += 1,
                        _ => {}
                    }
                    meta.tier = tier;
                    meta.epoch = epoch;
                }
                Disposition::Destroy => {
                    self.garble(h, meta)?;
                    if meta.kind == ObjectKind::Data {
                        report.destroyed += 1;
                    }
                    meta.kind = ObjectKind::Garbage;
                    meta.unit_id.clear();
                    meta.len = 0;
                    meta.epoch = epoch;
                }
            }
            report.blocks_rewritten += meta.leaves.len();
        }
        self.commit(&mut st, units, next)?;
        Ok(report)
    }

    /// Overwrites a single unit's blocks under a throwaway key.
    pub fn destroy_unit(&self, unit_id: &str) -> Result<bool> {
        let mut st = self.state.write();
        self.check_fresh(&st)?;
        let h = self.vault.unit_hash(unit_id);
        let mut units = st.units.clone();
        let Some(meta) = units.get_mut(&h) else { return Ok(false) };
        self.garble(&h, meta)?;
        meta.kind = ObjectKind::Garbage;
        meta.unit_id.clear();
        meta.len = 0;
        let next = st.counter + 1;
        self.commit(&mut st, units, next)?;
        Ok(true)
    }

    /// Moves one data unit between tiers, re-encrypting its blocks.
    pub fn set_tier(&self, unit_id: &str, tier: Tier) -> Result<()> {
        let mut st = self.state.write();
        self.check_fresh(&st)?;
        let h = self.vault.unit_hash(unit_id);
        let root = st.tree.root();
        let next = st.counter + 1;
        let mut units = st.units.clone();
        let meta = units
            .get_mut(&h)
            .filter(|m| m.kind == ObjectKind::Data)
            .ok_or_else(|| Error::NotFound(format!("unit {unit_id}")))?;
        if meta.tier == tier {
            return Ok(());
        }
        let key = self.vault.derive_duk(unit_id, meta.epoch)?.key;
        let base = st.offsets[&h];
        for i in 0..meta.leaves.len() {
            let from = self.block_path(meta.tier, &h, i);
            let pt = self.open_block(&key, &h, i, &from, &st.tree, base + i, &root)?;
            let bytes = self.seal_block(&key, &h, i, next, &pt);
            meta.leaves[i] = self.write_block(&self.block_path(tier, &h, i), &bytes)?;
            self.remove_block(&from)?;
        }
        meta.tier = tier;
        self.commit(&mut st, units, next)
    }

    fn garble(&self, h: &Hash32, meta: &mut UnitMeta) -> Result<()> {
        let throwaway: Key32 = crypto::random_bytes();
        for i in 0..meta.leaves.len() {
            let mut pt = vec![0u8; BLOCK_PLAINTEXT];
            rand::RngCore::fill_bytes(&mut rand::thread_rng(), &mut pt);
            let nonce: Nonce12 = crypto::random_bytes();
            let mut bytes = nonce.to_vec();
            bytes.extend(self.cipher.encrypt(&throwaway, &nonce, &block_aad(h, i), &pt));
            meta.leaves[i] = self.write_block(&self.block_path(meta.tier, h, i), &bytes)?;
        }
        Ok(())
    }

    fn seal_block(&self, key: &Key32, h: &Hash32, i: usize, counter: u64, pt: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; 12];
        nonce[..4].copy_from_slice(&h[..4]);
        nonce[4..8].copy_from_slice(&(i as u32).to_be_bytes());
        nonce[8..].copy_from_slice(&(counter as u32).to_be_bytes());
        let mut out = nonce.to_vec();
        out.extend(self.cipher.encrypt(key, &nonce, &block_aad(h, i), pt));
        out
    }

    fn write_block(&self, path: &Path, bytes: &[u8]) -> Result<Hash32> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::DurableWrite)?;
        }
        durable::atomic_write(path, bytes)?;
        self.emit(TraceEvent::BlockWrite { path: self.rel(path), size: bytes.len() });
        Ok(merkle::leaf_hash(bytes))
    }

    fn remove_block(&self, path: &Path) -> Result<()> {
        match fs::remove_file(path) {
            Ok(()) => {
                self.emit(TraceEvent::BlockRemove { path: self.rel(path) });
                if let Some(dir) = path.parent() {
                    let _ = fs::remove_dir(dir);
                }
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::DurableWrite(e)),
        }
    }

    fn commit(&self, st: &mut State, units: BTreeMap<Hash32, UnitMeta>, next: u64) -> Result<()> {
        let mut staged = State { units, counter: next, ..State::default() };
        staged.rebuild();
        self.persist(&staged, next)?;
        let bumped = self.counter.increment()?;
        debug_assert_eq!(bumped, next);
        st.units = staged.units;
        st.tree = staged.tree;
        st.offsets = staged.offsets;
        st.counter = next;
        self.emit(TraceEvent::Commit { counter: next });
        Ok(())
    }

    fn persist(&self, st: &State, counter: u64) -> Result<()> {
        self.enclave.seal_to_file(&self.root.join(INDEX_FILE), &encode_index(&st.units, counter))?;
        self.write_root(&st.tree.root(), counter)
    }

    fn write_root(&self, root: &Hash32, counter: u64) -> Result<()> {
        let mut body = root.to_vec();
        body.extend_from_slice(&counter.to_be_bytes());
        self.enclave.seal_to_file(&self.root.join(ROOT_FILE), &body)
    }

    fn read_root(&self) -> Result<Option<(Hash32, u64)>> {
        let Some(body) = self.enclave.unseal_file(&self.root.join(ROOT_FILE))? else { return Ok(None) };
        if body.len() != 40 {
            return Err(Error::Integrity("sealed root has wrong length".into()));
        }
        Ok(Some((body[..32].try_into().expect("32"), u64::from_be_bytes(body[32..].try_into().expect("8")))))
    }

    /// The sealed root on disk must match the in-memory one and must not lag
    /// the monotonic counter.
    fn check_fresh(&self, st: &State) -> Result<()> {
        if let Some(f) = &st.fault {
            return Err(f.to_error());
        }
        let tee = self.counter.read();
        let (root, counter) = self.read_root()?.unwrap_or((merkle::empty_root(), 0));
        if counter < tee {
            return Err(Error::Rollback { sealed: counter, current: tee });
        }
        if counter != st.counter || root != st.tree.root() {
            return Err(Error::Tamper("sealed root changed underneath the store".into()));
        }
        Ok(())
    }
}

fn handle_of(m: &UnitMeta) -> ObjectHandle {
    ObjectHandle { unit_id: m.unit_id.clone(), tier: m.tier, block_count: m.leaves.len() as u32, epoch: m.epoch, len: m.len }
}

fn block_aad(h: &Hash32, i: usize) -> Vec<u8> {
    let mut aad = b"blk".to_vec();
    aad.extend_from_slice(h);
    aad.extend_from_slice(&(i as u32).to_be_bytes());
    aad
}

pub fn frame_block(chunk: &[u8]) -> Vec<u8> {
    assert!(chunk.len() <= BLOCK_DATA);
    let mut pt = Vec::with_capacity(BLOCK_PLAINTEXT);
    pt.extend_from_slice(&(chunk.len() as u32).to_be_bytes());
    pt.extend_from_slice(chunk);
    pt.resize(BLOCK_PLAINTEXT, 0);
    pt
}

pub fn unframe_block(pt: &[u8]) -> Result<&[u8]> {
    if pt.len() != BLOCK_PLAINTEXT {
        return Err(Error::Integrity("block plaintext has wrong size".into()));
    }
    let len = u32::from_be_bytes(pt[..4].try_into().expect("4")) as usize;
    pt.get(4..4 + len)
        .filter(|_| len <= BLOCK_DATA)
        .ok_or_else(|| Error::Integrity("block length prefix out of range".into()))
}

const INDEX_MAGIC: &[u8; 5] = b"MTIX1";

fn encode_index(units: &BTreeMap<Hash32, UnitMeta>, counter: u64) -> Vec<u8> {
    let mut out = INDEX_MAGIC.to_vec();
    out.extend_from_slice(&counter.to_be_bytes());
    out.extend_from_slice(&(units.len() as u32).to_be_bytes());
    for (h, m) in units {
        out.extend_from_slice(h);
        out.extend_from_slice(&(m.unit_id.len() as u16).to_be_bytes());
        out.extend_from_slice(m.unit_id.as_bytes());
        out.push(match m.kind {
            ObjectKind::Data => 0,
            ObjectKind::Chaff => 1,
            ObjectKind::Garbage => 2,
        });
        out.push(match m.tier {
            Tier::Hot => 0,
            Tier::Cold => 1,
        });
        out.extend_from_slice(&m.epoch.to_be_bytes());
        out.extend_from_slice(&m.len.to_be_bytes());
        out.extend_from_slice(&(m.leaves.len() as u32).to_be_bytes());
        for l in &m.leaves {
            out.extend_from_slice(l);
        }
    }
    out
}

fn decode_index(bytes: &[u8]) -> Result<(BTreeMap<Hash32, UnitMeta>, u64)> {
    let bad = || Error::Integrity("sealed index is malformed".into());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5).ok_or_else(bad)? != INDEX_MAGIC {
        return Err(bad());
    }
    let counter = r.u64().ok_or_else(bad)?;
    let n = r.u32().ok_or_else(bad)?;
    let mut units = BTreeMap::new();
    for _ in 0..n {
        let h: Hash32 = r.take(32).ok_or_else(bad)?.try_into().expect("32");
        let id_len = r.u16().ok_or_else(bad)? as usize;
        let unit_id = String::from_utf8(r.take(id_len).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
        let kind = match r.take(1).ok_or_else(bad)?[0] {
            0 => ObjectKind::Data,
            1 => ObjectKind::Chaff,
            2 => ObjectKind::Garbage,
            _ => return Err(bad()),
        };
        let tier = match r.take(1).ok_or_else(bad)?[0] {
            0 => Tier::Hot,
            1 => Tier::Cold,
            _ => return Err(bad()),
        };
        let epoch = r.u64().ok_or_else(bad)?;
        let len = r.u64().ok_or_else(bad)?;
        let nblocks = r.u32().ok_or_else(bad)? as usize;
        let mut leaves = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            leaves.push(r.take(32).ok_or_else(bad)?.try_into().expect("32"));
        }
        units.insert(h, UnitMeta { unit_id, kind, tier, epoch, len, leaves });
    }
    if r.pos != bytes.len() {
        return Err(bad());
    }
    Ok((units, counter))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_be_bytes(b.try_into().expect("2")))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_be_bytes(b.try_into().expect("4")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_be_bytes(b.try_into().expect("8")))
    }
}
