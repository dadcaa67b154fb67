//! Episodic stream, profile graph, retention and oblivious decay.
//!
//! Episode bodies live in the sealed store as `ep:<id>` units. Their
//! retention metadata and the profile facts live in a sealed catalog. The
//! decay sweep rotates the key epoch and rewrites the entire store, so the
//! host sees the same write pattern whether one memory faded or fifty did.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use parking_lot::RwLock;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyvault::{DeletionProof, ShredRecorder};
use crate::retrieval::GraphView;
use crate::sealed_store::graph::{GraphStore, MAX_ID_LEN};
use crate::sealed_store::{Disposition, SealedStore, Tier};
use crate::tee_sim::SharedEnclave;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_THETA: f64 = 0.05;
pub const DEFAULT_INITIAL_STRENGTH: f64 = 86_400.0;

pub const NEW_FACT_CONFIDENCE: f64 = 0.6;
pub const REASSERT_STEP: f64 = 0.1;
pub const CONTRADICTION_STEP: f64 = 0.2;
pub const REPLACE_AT: f64 = 0.2;
const CONF_EPS: f64 = 1e-9;

pub const EPISODE_PREFIX: &str = "ep:";

pub fn unit_id(episode_id: &str) -> String {
    format!("{EPISODE_PREFIX}{episode_id}")
}

/// R = e^(−t/S).
pub fn retention(t: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("strength must be positive, got {s}")));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("elapsed time must be non-negative, got {t}")));
    }
    Ok((-t / s).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum MemoryTier {
    Active,
    Cold,
}

// Numeric on disk so the catalog length does not depend on tier counts.
impl From<MemoryTier> for u8 {
    fn from(t: MemoryTier) -> u8 {
        match t {
            MemoryTier::Active => 0,
            MemoryTier::Cold => 1,
        }
    }
}

impl TryFrom<u8> for MemoryTier {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(MemoryTier::Active),
            1 => Ok(MemoryTier::Cold),
            _ => Err(format!("bad tier {v}")),
        }
    }
}

impl MemoryTier {
    fn store_tier(self) -> Tier {
        match self {
            MemoryTier::Active => Tier::Hot,
            MemoryTier::Cold => Tier::Cold,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryTier::Active => "active",
            MemoryTier::Cold => "cold",
        }
    }
}

/// The part of an episode that goes into the sealed store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBody {
    pub episode_id: String,
    pub timestamp: u64,
    pub source_app: String,
    pub intent: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub episode_id: String,
    pub timestamp: u64,
    pub owner: String,
    pub resource: String,
    pub strength_s: f64,
    pub last_event_time: u64,
    pub tier: MemoryTier,
    pub consolidated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub body: EpisodeBody,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn id(&self) -> &str {
        &self.body.episode_id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileFact {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub confidence: f64,
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

pub trait Summarizer: Send + Sync {
    fn id(&self) -> &str;
    fn extract(&self, text: &str) -> Vec<Triple>;
}

static STUB_PATTERN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"([\w\[\]-]+)\s+(prefers|works_on)\s+([\w\[\]-]+)").expect("static regex"));

/// Pulls `X prefers Y` and `X works_on Y` triples out of text.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubSummarizer;

impl Summarizer for StubSummarizer {
    fn id(&self) -> &str {
        "stub-v1"
    }

    fn extract(&self, text: &str) -> Vec<Triple> {
        STUB_PATTERN
            .captures_iter(text)
            .map(|c| Triple { subject: c[1].to_string(), predicate: c[2].to_string(), object: c[3].to_string() })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineConfig {
    pub alpha: f64,
    pub theta: f64,
    pub initial_strength: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, theta: DEFAULT_THETA, initial_strength: DEFAULT_INITIAL_STRENGTH }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub epoch: u64,
    pub scanned: usize,
    pub demoted: usize,
    pub rewritten: usize,
    pub destroyed: usize,
}

impl SweepReport {
    pub fn log_line(&self) -> String {
        format!("sweep epoch={} scanned={} demoted={} rewritten={}", self.epoch, self.scanned, self.demoted, self.rewritten)
    }
}

#[derive(Default, Serialize, Deserialize)]
struct Catalog {
    episodes: BTreeMap<String, EpisodeMeta>,
    facts: Vec<ProfileFact>,
}

impl Catalog {
    fn fact_mut(&mut self, subject: &str, predicate: &str) -> Option<&mut ProfileFact> {
        self.facts.iter_mut().find(|f| f.subject == subject && f.predicate == predicate)
    }
}

const CATALOG_PAD: usize = 4096;

pub struct MemoryEngine {
    cfg: EngineConfig,
    enclave: SharedEnclave,
    store: Arc<SealedStore>,
    graph: GraphStore,
    catalog_path: PathBuf,
    catalog: RwLock<Catalog>,
}

impl MemoryEngine {
    /// Opens or creates the engine. The catalog lives in `engine_dir`; the
    /// profile graph blocks in `graph_dir`.
    pub fn open(
        engine_dir: &Path,
        graph_dir: &Path,
        enclave: SharedEnclave,
        store: Arc<SealedStore>,
        cipher: Arc<dyn crate::crypto::BlockCipher>,
        cfg: EngineConfig,
    ) -> Result<Self> {
        if !(cfg.alpha > 0.0) || !(cfg.theta > 0.0 && cfg.theta < 1.0) || !(cfg.initial_strength > 0.0) {
            return Err(Error::Domain("alpha and initial strength must be positive and theta in (0, 1)".into()));
        }
        let catalog_path = engine_dir.join("catalog.sealed");
        let catalog = match enclave.unseal_file(&catalog_path)? {
            Some(bytes) => serde_json::from_slice(&bytes).map_err(|_| Error::Integrity("engine catalog is malformed".into()))?,
            None => Catalog::default(),
        };
        let vault = store.vault().clone();
        let graph = GraphStore::new(
            graph_dir,
            vault.service_key("profile-graph"),
            vault.service_key("profile-graph-salt"),
            crate::sealed_store::graph::DEFAULT_SLOTS,
            cipher,
        );
        Ok(Self { cfg, enclave, store, graph, catalog_path, catalog: RwLock::new(catalog) })
    }

    pub fn config(&self) -> EngineConfig {
        self.cfg
    }

    pub fn store(&self) -> &Arc<SealedStore> {
        &self.store
    }

    pub fn graph_store(&self) -> &GraphStore {
        &self.graph
    }

    fn now(&self) -> u64 {
        self.enclave.now()
    }

    fn persist(&self, cat: &Catalog) -> Result<()> {
        let mut bytes = serde_json::to_vec(cat)?;
        let padded = bytes.len().div_ceil(CATALOG_PAD).max(1) * CATALOG_PAD;
        bytes.resize(padded, b' ');
        self.enclave.seal_to_file(&self.catalog_path, &bytes)
    }

    /// Builds an episode stamped now with the initial strength.
    pub fn new_episode(&self, episode_id: &str, owner: &str, resource: &str, source_app: &str, intent: &str, text: &str, embedding: Vec<f32>) -> Episode {
        let now = self.now();
        Episode {
            body: EpisodeBody {
                episode_id: episode_id.into(),
                timestamp: now,
                source_app: source_app.into(),
                intent: intent.into(),
                text: text.into(),
                embedding,
            },
            meta: EpisodeMeta {
                episode_id: episode_id.into(),
                timestamp: now,
                owner: owner.into(),
                resource: resource.into(),
                strength_s: self.cfg.initial_strength,
                last_event_time: now,
                tier: MemoryTier::Active,
                consolidated: false,
            },
        }
    }

    pub fn encode_body(body: &EpisodeBody) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(body)?)
    }

    /// Records an episode whose body is already durable in the store.
    pub fn register(&self, ep: &Episode) -> Result<()> {
        self.store.vault().register_unit(&unit_id(ep.id()))?;
        let mut cat = self.catalog.write();
        cat.episodes.insert(ep.id().to_string(), ep.meta.clone());
        self.persist(&cat)
    }

    /// Writes the body directly (one commit) and registers the episode.
    pub fn insert(&self, ep: &Episode) -> Result<()> {
        self.store.put_object(&unit_id(ep.id()), &Self::encode_body(&ep.body)?)?;
        self.register(ep)
    }

    pub fn contains(&self, episode_id: &str) -> bool {
        self.catalog.read().episodes.contains_key(episode_id)
    }

    pub fn len(&self) -> usize {
        self.catalog.read().episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn meta(&self, episode_id: &str) -> Option<EpisodeMeta> {
        self.catalog.read().episodes.get(episode_id).cloned()
    }

    pub fn metas(&self) -> Vec<EpisodeMeta> {
        self.catalog.read().episodes.values().cloned().collect()
    }

    /// Reads an episode in either tier without changing it.
    pub fn get(&self, episode_id: &str) -> Result<Episode> {
        let uid = unit_id(episode_id);
        if self.store.vault().is_shredded(&uid) {
            return Err(Error::Shredded(episode_id.to_string()));
        }
        let meta = self.meta(episode_id).ok_or_else(|| Error::NotFound(format!("episode {episode_id}")))?;
        let bytes = self.store.get_unit(&uid)?;
        let body = serde_json::from_slice(&bytes).map_err(|_| Error::Integrity(format!("episode {episode_id} body is malformed")))?;
        Ok(Episode { body, meta })
    }

    pub fn retention_of(&self, episode_id: &str) -> Result<f64> {
        let m = self.meta(episode_id).ok_or_else(|| Error::NotFound(format!("episode {episode_id}")))?;
        retention(self.now().saturating_sub(m.last_event_time) as f64, m.strength_s)
    }

    /// S ← S·(1+α) and t resets. A cold episode is promoted first.
    pub fn reinforce(&self, episode_id: &str) -> Result<f64> {
        let uid = unit_id(episode_id);
        if self.store.vault().is_shredded(&uid) {
            return Err(Error::Shredded(episode_id.to_string()));
        }
        let mut cat = self.catalog.write();
        let m = cat.episodes.get_mut(episode_id).ok_or_else(|| Error::NotFound(format!("episode {episode_id}")))?;
        if m.tier == MemoryTier::Cold {
            self.store.set_tier(&uid, Tier::Hot)?;
            m.tier = MemoryTier::Active;
        }
        m.strength_s *= 1.0 + self.cfg.alpha;
        m.last_event_time = self.now();
        let s = m.strength_s;
        self.persist(&cat)?;
        Ok(s)
    }

    /// Brings an episode back to the active tier and reinforces it once.
    pub fn recall_promote(&self, episode_id: &str) -> Result<Episode> {
        self.reinforce(episode_id)?;
        self.get(episode_id)
    }

    /// Demotes faded episodes, rotates the epoch and rewrites every block.
    pub fn decay_sweep(&self, now: u64) -> Result<SweepReport> {
        let mut cat = self.catalog.write();
        let mut report = SweepReport::default();
        for m in cat.episodes.values_mut() {
            if m.tier != MemoryTier::Active {
                continue;
            }
            report.scanned += 1;
            let r = retention(now.saturating_sub(m.last_event_time) as f64, m.strength_s)?;
            if r < self.cfg.theta {
                m.tier = MemoryTier::Cold;
                report.demoted += 1;
            }
        }
        report.epoch = self.store.vault().rotate_epoch()?;
        let tiers: BTreeMap<String, Tier> =
            cat.episodes.values().map(|m| (unit_id(&m.episode_id), m.tier.store_tier())).collect();
        let rw = self.store.rewrite_all(|u| Disposition::Keep(tiers.get(u.unit_id).copied().unwrap_or(u.tier)))?;
        report.rewritten = rw.blocks_rewritten;
        report.destroyed = rw.destroyed;
        self.persist(&cat)?;
        log::info!("{}", report.log_line());
        Ok(report)
    }

    /// Runs `summarizer` over unconsolidated episodes with timestamps in
    /// `[from, to)` and merges the triples. Returns the facts touched.
    pub fn consolidate(&self, from: u64, to: u64, summarizer: &dyn Summarizer) -> Result<Vec<ProfileFact>> {
        let ids: Vec<String> = {
            let cat = self.catalog.read();
            cat.episodes
                .values()
                .filter(|m| !m.consolidated && m.timestamp >= from && m.timestamp < to)
                .map(|m| m.episode_id.clone())
                .collect()
        };
        let mut extracted = Vec::new();
        for id in &ids {
            match self.get(id) {
                Ok(ep) => extracted.push((id.clone(), summarizer.extract(&ep.body.text))),
                Err(Error::Shredded(_)) | Err(Error::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let mut cat = self.catalog.write();
        let mut touched: BTreeSet<(String, String)> = BTreeSet::new();
        let mut subjects = BTreeSet::new();
        for (id, triples) in extracted {
            if !cat.episodes.contains_key(&id) {
                continue;
            }
            for t in triples {
                if t.subject.len() > MAX_ID_LEN || t.object.len() > MAX_ID_LEN {
                    continue;
                }
                merge_fact(&mut cat, &t, &id);
                touched.insert((t.subject.clone(), t.predicate.clone()));
                subjects.insert(t.subject.clone());
                subjects.insert(t.object.clone());
            }
            if let Some(m) = cat.episodes.get_mut(&id) {
                m.consolidated = true;
            }
        }
        self.persist(&cat)?;
        self.sync_graph(&cat, &subjects)?;
        Ok(cat
            .facts
            .iter()
            .filter(|f| touched.contains(&(f.subject.clone(), f.predicate.clone())))
            .cloned()
            .collect())
    }

    fn adjacency(cat: &Catalog, node: &str) -> Vec<String> {
        let mut n: BTreeSet<String> = BTreeSet::new();
        for f in &cat.facts {
            if f.subject == node {
                n.insert(f.object.clone());
            }
            if f.object == node {
                n.insert(f.subject.clone());
            }
        }
        n.into_iter().collect()
    }

    fn sync_graph(&self, cat: &Catalog, nodes: &BTreeSet<String>) -> Result<()> {
        for node in nodes {
            self.graph.store_adjacency(node, &Self::adjacency(cat, node))?;
        }
        Ok(())
    }

    pub fn facts(&self) -> Vec<ProfileFact> {
        self.catalog.read().facts.clone()
    }

    pub fn fact(&self, subject: &str, predicate: &str) -> Option<ProfileFact> {
        self.catalog.read().facts.iter().find(|f| f.subject == subject && f.predicate == predicate).cloned()
    }

    /// Crypto-shreds the episode, drops it from the catalog and strips it
    /// from fact provenance. Facts left without provenance are removed.
    pub fn forget(&self, episode_id: &str, recorder: &dyn ShredRecorder) -> Result<DeletionProof> {
        let uid = unit_id(episode_id);
        let mut cat = self.catalog.write();
        if !cat.episodes.contains_key(episode_id) && !self.store.vault().is_shredded(&uid) {
            return Err(Error::NotFound(format!("episode {episode_id}")));
        }
        let proof = self.store.vault().shred(&uid, recorder)?;
        cat.episodes.remove(episode_id);
        let mut affected = BTreeSet::new();
        for f in cat.facts.iter_mut() {
            let before = f.provenance.len();
            f.provenance.retain(|p| p != episode_id);
            if f.provenance.len() != before {
                affected.insert(f.subject.clone());
                affected.insert(f.object.clone());
            }
        }
        cat.facts.retain(|f| !f.provenance.is_empty());
        self.persist(&cat)?;
        self.sync_graph(&cat, &affected)?;
        Ok(proof)
    }

    /// Snapshot of the profile graph for traversal.
    pub fn profile_view(&self) -> ProfileView<'_> {
        let cat = self.catalog.read();
        let mut conf = BTreeMap::new();
        for f in &cat.facts {
            for (a, b) in [(&f.subject, &f.object), (&f.object, &f.subject)] {
                let e = conf.entry((a.clone(), b.clone())).or_insert(0.0f64);
                *e = e.max(f.confidence);
            }
        }
        ProfileView { graph: &self.graph, confidence: conf }
    }
}

fn merge_fact(cat: &mut Catalog, t: &Triple, episode_id: &str) {
    match cat.fact_mut(&t.subject, &t.predicate) {
        None => cat.facts.push(ProfileFact {
            subject: t.subject.clone(),
            predicate: t.predicate.clone(),
            object: t.object.clone(),
            confidence: NEW_FACT_CONFIDENCE,
            provenance: vec![episode_id.to_string()],
        }),
        Some(f) if f.object == t.object => {
            f.confidence = (f.confidence + REASSERT_STEP).min(1.0);
            if !f.provenance.iter().any(|p| p == episode_id) {
                f.provenance.push(episode_id.to_string());
            }
        }
        Some(f) => {
            f.confidence = (f.confidence - CONTRADICTION_STEP).max(0.0);
            if f.confidence <= REPLACE_AT + CONF_EPS {
                *f = ProfileFact {
                    subject: t.subject.clone(),
                    predicate: t.predicate.clone(),
                    object: t.object.clone(),
                    confidence: NEW_FACT_CONFIDENCE,
                    provenance: vec![episode_id.to_string()],
                };
            }
        }
    }
}

/// Adjacency read from the sealed graph blocks, weights from the catalog.
pub struct ProfileView<'a> {
    graph: &'a GraphStore,
    confidence: BTreeMap<(String, String), f64>,
}

impl GraphView for ProfileView<'_> {
    fn neighbors(&self, node: &str) -> Vec<(String, f64)> {
        match self.graph.load_adjacency(node) {
            Ok(ns) => ns
                .into_iter()
                .filter_map(|n| self.confidence.get(&(node.to_string(), n.clone())).map(|&c| (n, c)))
                .collect(),
            Err(e) => {
                log::error!("profile graph read failed: {e}");
                Vec::new()
            }
        }
    }

    fn contains(&self, node: &str) -> bool {
        self.confidence.keys().any(|(a, _)| a == node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, MockClock};
    use crate::crypto::AesGcm;
    use crate::governance::AuditLog;
    use crate::keyvault::KeyVault;
    use crate::retrieval::graph_recall;
    use crate::sealed_store::{TraceEvent, WriteTrace};
    use crate::tee_sim::{Enclave, MonotonicCounter, PlatformKey};
    use proptest::prelude::*;
    use std::fs;

    struct Env {
        dir: tempfile::TempDir,
        clock: MockClock,
        engine: MemoryEngine,
        audit: AuditLog,
    }

    fn env() -> Env {
        let dir = tempfile::tempdir().unwrap();
        let clock = MockClock::new(1_000_000);
        let engine = open(dir.path(), &clock);
        let audit = AuditLog::open(dir.path().join("audit.log"), Arc::new(clock.clone())).unwrap();
        Env { dir, clock, engine, audit }
    }

    fn open(dir: &Path, clock: &MockClock) -> MemoryEngine {
        let enclave = Arc::new(Enclave::launch(PlatformKey::from_secret([2; 32]), b"c", b"p", Arc::new(clock.clone())));
        let vault = Arc::new(KeyVault::open(dir.join("vault"), enclave.clone()).unwrap());
        let counter = MonotonicCounter::open(dir.join("counter")).unwrap();
        let store = Arc::new(SealedStore::open(dir.join("store"), enclave.clone(), vault, counter, Arc::new(AesGcm)).unwrap());
        MemoryEngine::open(&dir.join("engine"), &dir.join("graph"), enclave, store, Arc::new(AesGcm), EngineConfig::default()).unwrap()
    }

    fn add(e: &MemoryEngine, id: &str, text: &str) -> Episode {
        let ep = e.new_episode(id, "agent", "notes:general", "editor", "note", text, vec![0.5; 4]);
        e.insert(&ep).unwrap();
        ep
    }

    #[test]
    fn retention_examples() {
        assert_eq!(retention(0.0, 5.0).unwrap(), 1.0);
        assert!((retention(100.0, 100.0).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        let r1 = retention(7.0, 7.0).unwrap();
        assert!((retention(14.0, 7.0).unwrap() - r1 * r1).abs() < 1e-15);
        assert!(matches!(retention(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(retention(1.0, -2.0), Err(Error::Domain(_))));
        assert!(matches!(retention(-1.0, 2.0), Err(Error::Domain(_))));
        assert!(retention(1.0, f64::NAN).is_err());
    }

    #[test]
    fn retention_matches_high_precision_values() {
        // mpmath at 50 digits.
        let frozen = [
            (0.0, 1.0, 1.0),
            (1.0, 1.0, 0.367_879_441_171_442_321_6),
            (86_400.0, 86_400.0, 0.367_879_441_171_442_321_6),
            (3.0, 1.0, 0.049_787_068_367_863_942_98),
            (12_345.0, 86_400.0, 0.866_856_400_068_885_370_1),
            (200_000.0, 86_400.0, 0.098_784_475_729_832_215_36),
            (1.0, 3.0, 0.716_531_310_573_789_250_4),
            (700.0, 1.0, 9.859_676_543_759_770_857e-305),
            (5e-9, 1.0, 0.999_999_995_000_000_012_5),
            (40.0, 2.5, 1.125_351_747_192_591_145e-7),
        ];
        for (t, s, want) in frozen {
            assert!((retention(t, s).unwrap() - want).abs() < 1e-12, "t={t} s={s}");
        }
    }

    #[test]
    fn retention_grid_against_series_oracle() {
        // Independent oracle: e^(-x) = (e^(-x/2^k))^(2^k), with k chosen so
        // the inner argument is at most 1/2 and the inner value from a
        // Taylor series.
        fn oracle(x: f64) -> f64 {
            let mut k = 0;
            while x / f64::powi(2.0, k) > 0.5 {
                k += 1;
            }
            let y = -x / f64::powi(2.0, k);
            let mut term = 1.0f64;
            let mut sum = 1.0f64;
            for n in 1..25 {
                term *= y / n as f64;
                sum += term;
            }
            let mut r = sum;
            for _ in 0..k {
                r *= r;
            }
            r
        }
        let mut worst = 0.0f64;
        for i in 0..100_000u32 {
            let t = f64::from(i % 1000) * 37.0;
            let s = 1.0 + f64::from(i / 1000) * 1234.5;
            let r = retention(t, s).unwrap();
            worst = worst.max((r - oracle(t / s)).abs());
        }
        assert!(worst < 1e-12, "worst {worst}");
    }

    #[test]
    fn reinforcement_rule() {
        let e = env();
        add(&e.engine, "a", "x");
        assert_eq!(e.engine.meta("a").unwrap().strength_s, DEFAULT_INITIAL_STRENGTH);
        e.clock.advance(5_000);
        assert_eq!(e.engine.reinforce("a").unwrap(), DEFAULT_INITIAL_STRENGTH * 1.5);
        assert_eq!(e.engine.retention_of("a").unwrap(), 1.0);
        assert_eq!(e.engine.reinforce("a").unwrap(), DEFAULT_INITIAL_STRENGTH * 2.25);
    }

    #[test]
    fn strength_100_gives_150() {
        let e = env();
        add(&e.engine, "a", "x");
        e.engine.catalog.write().episodes.get_mut("a").unwrap().strength_s = 100.0;
        assert_eq!(e.engine.reinforce("a").unwrap(), 150.0);
    }

    #[test]
    fn sweep_demotes_at_threshold_and_promote_restores() {
        let e = env();
        add(&e.engine, "old", "ancient marker-old-77");
        e.clock.advance(3 * 86_400);
        add(&e.engine, "new", "fresh");
        let r = e.engine.decay_sweep(e.clock.now()).unwrap();
        assert_eq!((r.scanned, r.demoted), (2, 1));
        assert_eq!(e.engine.meta("old").unwrap().tier, MemoryTier::Cold);
        assert_eq!(e.engine.meta("new").unwrap().tier, MemoryTier::Active);
        assert_eq!(r.log_line(), format!("sweep epoch={} scanned=2 demoted=1 rewritten={}", r.epoch, r.rewritten));
        for path in e.engine.store().block_paths(&unit_id("old")) {
            assert!(path.to_string_lossy().contains("/cold/"));
        }
        let ep = e.engine.recall_promote("old").unwrap();
        assert_eq!(ep.body.text, "ancient marker-old-77");
        assert_eq!(ep.meta.tier, MemoryTier::Active);
        assert_eq!(e.engine.retention_of("old").unwrap(), 1.0);
        assert_eq!(ep.meta.strength_s, DEFAULT_INITIAL_STRENGTH * 1.5);
    }

    #[test]
    fn no_plaintext_on_disk() {
        let e = env();
        add(&e.engine, "p", "planted-cold-marker prefers secrecy");
        e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        e.clock.advance(10 * 86_400);
        e.engine.decay_sweep(e.clock.now()).unwrap();
        for entry in walk(e.dir.path()) {
            let bytes = fs::read(&entry).unwrap();
            for marker in [&b"planted-cold-marker"[..], b"secrecy"] {
                assert!(!bytes.windows(marker.len()).any(|w| w == marker), "{} leaks", entry.display());
            }
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    fn sweep_trace(decayed: usize) -> Vec<usize> {
        let e = env();
        for i in 0..60 {
            add(&e.engine, &format!("e{i:02}"), &"x".repeat(100 + (i % 3) * 5000));
        }
        e.clock.advance(10);
        for i in decayed..60 {
            e.engine.reinforce(&format!("e{i:02}")).unwrap();
        }
        // Advance so exactly the unreinforced ones fall below theta.
        e.clock.advance((3.1 * DEFAULT_INITIAL_STRENGTH) as u64);
        let trace: WriteTrace = Default::default();
        e.engine.store().set_trace(Some(trace.clone()));
        let r = e.engine.decay_sweep(e.clock.now()).unwrap();
        assert_eq!(r.demoted, decayed);
        let sizes: Vec<usize> = trace
            .lock()
            .iter()
            .filter_map(|ev| match ev {
                TraceEvent::BlockWrite { size, .. } => Some(*size),
                _ => None,
            })
            .collect();
        sizes
    }

    #[test]
    fn sweep_trace_independent_of_decayed_count() {
        let none = sweep_trace(0);
        let one = sweep_trace(1);
        let fifty = sweep_trace(50);
        assert_eq!(one, fifty);
        assert_eq!(none, one);
        let blocks: usize = (0..60).map(|i| (100 + (i % 3) * 5000usize).div_ceil(4092)).sum();
        assert_eq!(none.len(), blocks, "every block rewritten even with nothing decayed");
    }

    #[test]
    fn consolidation_rules() {
        let e = env();
        add(&e.engine, "1", "alice prefers rust");
        let facts = e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!((facts[0].subject.as_str(), facts[0].object.as_str(), facts[0].confidence), ("alice", "rust", 0.6));
        assert!(e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap().is_empty(), "episodes consolidate once");
        add(&e.engine, "2", "we know alice prefers rust");
        let f = e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        assert!((f[0].confidence - 0.7).abs() < 1e-12);
        assert_eq!(f[0].provenance, vec!["1".to_string(), "2".to_string()]);
        add(&e.engine, "3", "alice prefers go");
        let f = e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        assert_eq!(f[0].object, "rust");
        assert!((f[0].confidence - 0.5).abs() < 1e-12);
        add(&e.engine, "4", "alice prefers go");
        let f = e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        assert_eq!(f[0].object, "rust");
        assert!((f[0].confidence - 0.3).abs() < 1e-12);
        add(&e.engine, "5", "alice prefers go");
        let f = e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        assert_eq!((f[0].object.as_str(), f[0].confidence), ("go", 0.6));
        assert_eq!(f[0].provenance, vec!["5".to_string()]);
    }

    #[test]
    fn window_bounds_and_empty_window() {
        let e = env();
        add(&e.engine, "a", "bob works_on compiler");
        let t = e.engine.meta("a").unwrap().timestamp;
        assert!(e.engine.consolidate(0, t, &StubSummarizer).unwrap().is_empty());
        assert_eq!(e.engine.consolidate(t, t + 1, &StubSummarizer).unwrap().len(), 1);
    }

    #[test]
    fn profile_graph_recall_and_forget() {
        let e = env();
        add(&e.engine, "a", "alice works_on memtrust");
        add(&e.engine, "b", "memtrust prefers rust");
        e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        let hits = graph_recall(&e.engine.profile_view(), &["alice".to_string()], 2);
        let score = |n: &str| hits.iter().find(|h| h.0 == n).map(|h| h.1);
        assert_eq!(score("alice"), Some(1.0));
        assert_eq!(score("memtrust"), Some(0.3));
        assert_eq!(score("rust"), Some(0.15));
        let proof = e.engine.forget("b", &e.audit).unwrap();
        assert_eq!(proof.unit_id, unit_id("b"));
        assert!(e.engine.fact("memtrust", "prefers").is_none());
        let hits = graph_recall(&e.engine.profile_view(), &["alice".to_string()], 2);
        assert!(hits.iter().all(|h| h.0 != "rust"));
        assert!(matches!(e.engine.get("b"), Err(Error::Shredded(_))));
        assert!(matches!(e.engine.recall_promote("b"), Err(Error::Shredded(_))));
        assert!(matches!(e.engine.forget("zzz", &e.audit), Err(Error::NotFound(_))));
    }

    #[test]
    fn catalog_survives_reopen_and_is_padded() {
        let e = env();
        add(&e.engine, "a", "alice prefers tea");
        e.engine.consolidate(0, u64::MAX, &StubSummarizer).unwrap();
        let size = fs::metadata(e.dir.path().join("engine/catalog.sealed")).unwrap().len();
        e.clock.advance(4 * 86_400);
        e.engine.decay_sweep(e.clock.now()).unwrap();
        assert_eq!(fs::metadata(e.dir.path().join("engine/catalog.sealed")).unwrap().len(), size);
        let again = open(e.dir.path(), &e.clock);
        assert_eq!(again.meta("a").unwrap().tier, MemoryTier::Cold);
        assert_eq!(again.get("a").unwrap().body.text, "alice prefers tea");
        assert_eq!(again.facts().len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn confidence_stays_in_bounds(script in prop::collection::vec((0usize..3, 0usize..3), 1..40)) {
            let mut cat = Catalog::default();
            let subjects = ["a", "b", "c"];
            let objects = ["x", "y", "z"];
            for (i, (s, o)) in script.into_iter().enumerate() {
                let t = Triple { subject: subjects[s].into(), predicate: "prefers".into(), object: objects[o].into() };
                merge_fact(&mut cat, &t, &i.to_string());
                for f in &cat.facts {
                    prop_assert!((0.0..=1.0).contains(&f.confidence));
                    prop_assert!(!f.provenance.is_empty());
                }
            }
        }
    }
}
