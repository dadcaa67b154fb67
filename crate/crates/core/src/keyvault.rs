//! Key hierarchy: master key → epoch → per-unit Data Unit Keys (DUKs).
//!
//! Destroying access to a DUK is how a unit is deleted. Once a unit id is in
//! the tombstone set the vault refuses to derive any of its keys, for any
//! epoch, and a signed [`DeletionProof`] referencing the audit entry for the
//! shred is handed back.
//!
//! Nothing in the vault's directory holds the master key outside a
//! [`SealedBlob`](crate::tee_sim::SealedBlob), and tombstones carry salted
//! hashes rather than unit ids.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ed25519_dalek::VerifyingKey;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::crypto::{self, Hash32, Key32};
use crate::error::{Error, Result};
use crate::governance::{self, AuditEntry, AuditEvent, AuditLog};
use crate::hexser;
use crate::tee_sim::{self, SharedEnclave};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyState {
    Active,
    Shredded,
}

#[derive(Clone, PartialEq, Eq)]
pub struct DataUnitKey {
    pub unit_id: String,
    pub epoch: u64,
    pub key: Key32,
    pub state: KeyState,
}

impl std::fmt::Debug for DataUnitKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataUnitKey")
            .field("unit_id", &self.unit_id)
            .field("epoch", &self.epoch)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionProof {
    pub unit_id: String,
    pub shredded_at: u64,
    #[serde(with = "hexser")]
    pub audit_head_hash: Hash32,
    #[serde(with = "hexser")]
    pub signature: [u8; 64],
}

impl DeletionProof {
    pub fn signed_bytes(unit_id: &str, shredded_at: u64, audit_head_hash: &Hash32) -> Vec<u8> {
        let mut msg = b"memtrust-deletion-v1".to_vec();
        msg.extend_from_slice(&(unit_id.len() as u32).to_be_bytes());
        msg.extend_from_slice(unit_id.as_bytes());
        msg.extend_from_slice(&shredded_at.to_be_bytes());
        msg.extend_from_slice(audit_head_hash);
        msg
    }
}

/// Where shreds get recorded before they take effect.
pub trait ShredRecorder {
    /// Appends an audit entry for the shred and returns its hash.
    fn record_shred(&self, unit_id: &str) -> Result<Hash32>;
}

impl ShredRecorder for AuditLog {
    fn record_shred(&self, unit_id: &str) -> Result<Hash32> {
        Ok(self.append(AuditEvent::new("system", "shred", &format!("unit:{unit_id}"), "allow"))?.entry_hash)
    }
}

#[derive(Default, Serialize, Deserialize)]
struct PersistedState {
    epoch: u64,
    #[serde(default)]
    units: Vec<String>,
}

#[derive(Default)]
struct VaultState {
    epoch: u64,
    registered: HashSet<Hash32>,
    shredded: BTreeMap<Hash32, u64>,
    proofs: HashMap<Hash32, DeletionProof>,
}

pub struct KeyVault {
    dir: PathBuf,
    enclave: SharedEnclave,
    master: Key32,
    unit_salt: Key32,
    state: RwLock<VaultState>,
    writer: Mutex<()>,
}

const MASTER_FILE: &str = "master.sealed";
const STATE_FILE: &str = "state.sealed";
const TOMBSTONE_FILE: &str = "tombstones.sealed";
const PROOF_FILE: &str = "proofs.sealed";

impl KeyVault {
    /// Opens the vault in `dir`, generating and sealing a fresh master key on
    /// first use.
    pub fn open(dir: impl Into<PathBuf>, enclave: SharedEnclave) -> Result<Self> {
        let dir = dir.into();
        let master = match enclave.unseal_file(&dir.join(MASTER_FILE))? {
            Some(bytes) => bytes
                .try_into()
                .map_err(|_| Error::Integrity("sealed master key has wrong length".into()))?,
            None => {
                let m = crypto::random_bytes::<32>();
                enclave.seal_to_file(&dir.join(MASTER_FILE), &m)?;
                m
            }
        };
        Self::with_master(dir, enclave, master)
    }

    /// Opens the vault with a caller-chosen master key (sealing it if the
    /// vault is new). Used by tests that need to search for the key bytes.
    pub fn open_with_master(dir: impl Into<PathBuf>, enclave: SharedEnclave, master: Key32) -> Result<Self> {
        let dir = dir.into();
        if enclave.unseal_file(&dir.join(MASTER_FILE))?.is_none() {
            enclave.seal_to_file(&dir.join(MASTER_FILE), &master)?;
        }
        Self::with_master(dir, enclave, master)
    }

    fn with_master(dir: PathBuf, enclave: SharedEnclave, master: Key32) -> Result<Self> {
        let unit_salt = crypto::hkdf32(&master, b"", b"unit-salt");
        let vault = Self { dir, enclave, master, unit_salt, state: RwLock::new(VaultState::default()), writer: Mutex::new(()) };
        vault.load()?;
        Ok(vault)
    }

    fn load(&self) -> Result<()> {
        let mut st = self.state.write();
        if let Some(bytes) = self.enclave.unseal_file(&self.dir.join(STATE_FILE))? {
            let p: PersistedState = serde_json::from_slice(&bytes)?;
            st.epoch = p.epoch;
            st.registered = p
                .units
                .iter()
                .filter_map(|h| hexser::decode_array(h))
                .collect();
        }
        if let Some(bytes) = self.enclave.unseal_file(&self.dir.join(TOMBSTONE_FILE))? {
            st.shredded = decode_tombstones(&bytes)?;
        }
        if let Some(bytes) = self.enclave.unseal_file(&self.dir.join(PROOF_FILE))? {
            let proofs: Vec<DeletionProof> = serde_json::from_slice(&bytes)?;
            st.proofs = proofs.into_iter().map(|p| (self.unit_hash(&p.unit_id), p)).collect();
        }
        Ok(())
    }

    /// Salted hash naming a unit wherever the host could see it.
    pub fn unit_hash(&self, unit_id: &str) -> Hash32 {
        crypto::sha256_parts(&[b"unit", &self.unit_salt, unit_id.as_bytes()])
    }

    pub fn current_epoch(&self) -> u64 {
        self.state.read().epoch
    }

    /// Records that `unit_id` exists so it can later be shredded.
    pub fn register_unit(&self, unit_id: &str) -> Result<()> {
        let h = self.unit_hash(unit_id);
        if self.state.read().registered.contains(&h) {
            return Ok(());
        }
        let _w = self.writer.lock();
        let mut st = self.state.write();
        st.registered.insert(h);
        self.persist_state(&st)
    }

    pub fn is_registered(&self, unit_id: &str) -> bool {
        self.state.read().registered.contains(&self.unit_hash(unit_id))
    }

    pub fn is_shredded(&self, unit_id: &str) -> bool {
        self.state.read().shredded.contains_key(&self.unit_hash(unit_id))
    }

    /// `HKDF(master, salt = epoch BE, info = "duk:" ‖ unit_id)`.
    pub fn derive_duk(&self, unit_id: &str, epoch: u64) -> Result<DataUnitKey> {
        let st = self.state.read();
        if st.shredded.contains_key(&self.unit_hash(unit_id)) {
            return Err(Error::Shredded(unit_id.to_string()));
        }
        if epoch > st.epoch {
            return Err(Error::Epoch { requested: epoch, current: st.epoch });
        }
        drop(st);
        let mut info = b"duk:".to_vec();
        info.extend_from_slice(unit_id.as_bytes());
        Ok(DataUnitKey {
            unit_id: unit_id.to_string(),
            epoch,
            key: crypto::hkdf32(&self.master, &epoch.to_be_bytes(), &info),
            state: KeyState::Active,
        })
    }

    /// Sub-key for vault-internal purposes (graph blocks, segments).
    pub fn service_key(&self, purpose: &str) -> Key32 {
        crypto::hkdf32(&self.master, b"service", purpose.as_bytes())
    }

    pub fn rotate_epoch(&self) -> Result<u64> {
        let _w = self.writer.lock();
        let mut st = self.state.write();
        st.epoch += 1;
        self.persist_state(&st)?;
        Ok(st.epoch)
    }

    /// Shreds `unit_id`: the shred is audited, the tombstone made durable and
    /// a signed proof returned. Shredding again returns the original proof.
    pub fn shred(&self, unit_id: &str, recorder: &dyn ShredRecorder) -> Result<DeletionProof> {
        let h = self.unit_hash(unit_id);
        let _w = self.writer.lock();
        {
            let st = self.state.read();
            if let Some(p) = st.proofs.get(&h) {
                return Ok(p.clone());
            }
            if !st.registered.contains(&h) {
                return Err(Error::NotFound(format!("unit {unit_id}")));
            }
        }
        let audit_head_hash = recorder.record_shred(unit_id)?;
        let shredded_at = self.enclave.now();
        let signature = self.enclave.sign(&DeletionProof::signed_bytes(unit_id, shredded_at, &audit_head_hash));
        let proof = DeletionProof { unit_id: unit_id.to_string(), shredded_at, audit_head_hash, signature };

        let mut st = self.state.write();
        st.shredded.insert(h, shredded_at);
        st.proofs.insert(h, proof.clone());
        self.enclave.seal_to_file(&self.dir.join(TOMBSTONE_FILE), &encode_tombstones(&st.shredded))?;
        let proofs: Vec<&DeletionProof> = st.proofs.values().collect();
        self.enclave.seal_to_file(&self.dir.join(PROOF_FILE), &serde_json::to_vec(&proofs)?)?;
        Ok(proof)
    }

    pub fn shredded_count(&self) -> usize {
        self.state.read().shredded.len()
    }

    fn persist_state(&self, st: &VaultState) -> Result<()> {
        let mut units: Vec<String> = st.registered.iter().map(hex::encode).collect();
        units.sort();
        let p = PersistedState { epoch: st.epoch, units };
        self.enclave.seal_to_file(&self.dir.join(STATE_FILE), &serde_json::to_vec(&p)?)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

pub type SharedVault = Arc<KeyVault>;

/// True iff the proof is signed by `identity` and its audit hash is present
/// in `chain`, which must itself verify.
pub fn verify_deletion_proof(proof: &DeletionProof, identity: &VerifyingKey, chain: &[AuditEntry]) -> bool {
    let msg = DeletionProof::signed_bytes(&proof.unit_id, proof.shredded_at, &proof.audit_head_hash);
    if !tee_sim::verify_signature(identity, &msg, &proof.signature) {
        return false;
    }
    if !governance::verify_chain(chain, &[], identity).is_clean() {
        return false;
    }
    chain.iter().any(|e| e.entry_hash == proof.audit_head_hash)
}

/// Tombstone file body: repeated `u32 BE len (=40) ‖ 32-byte unit hash ‖
/// 8-byte BE shred time`.
pub fn encode_tombstones(set: &BTreeMap<Hash32, u64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(set.len() * 44);
    for (h, t) in set {
        out.extend_from_slice(&40u32.to_be_bytes());
        out.extend_from_slice(h);
        out.extend_from_slice(&t.to_be_bytes());
    }
    out
}

pub fn decode_tombstones(bytes: &[u8]) -> Result<BTreeMap<Hash32, u64>> {
    let mut out = BTreeMap::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let len = bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4")) as usize)
            .ok_or_else(|| Error::Integrity("tombstone length truncated".into()))?;
        let rec = bytes
            .get(pos + 4..pos + 4 + len)
            .filter(|r| r.len() == 40)
            .ok_or_else(|| Error::Integrity("tombstone record malformed".into()))?;
        out.insert(rec[..32].try_into().expect("32"), u64::from_be_bytes(rec[32..].try_into().expect("8")));
        pos += 4 + len;
    }
    Ok(out)
}
