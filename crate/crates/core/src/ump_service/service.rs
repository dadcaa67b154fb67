//! The enclave-side service: every component wired together behind the
//! four memory operations.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use ed25519_dalek::VerifyingKey;
use parking_lot::{Mutex, RwLock};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::SharedClock;
use crate::crypto::{AesGcm, BlockCipher, Hash32};
use crate::error::{Error, Result};
use crate::governance::{self, Action, AuditEntry, AuditEvent, AuditLog, PolicyBundle, PolicyEngine, Request, SessionTicket};
use crate::ingest::{self, ClientHello, RuleSet, ServerHello, SessionContext, UpdateQueue};
use crate::keyvault::{DeletionProof, KeyVault, SharedVault, ShredRecorder};
use crate::memory_engine::{self, Episode, MemoryEngine, StubSummarizer, SweepReport};
use crate::privacy_proxy::{CompletionClient, HttpClient, PrivacyProxy, Unmasked};
use crate::retrieval::buckets::{BucketStore, FetchTrace};
use crate::retrieval::hnsw::{cosine, Hnsw, HnswParams};
use crate::retrieval::bm25::InvertedIndex;
use crate::retrieval::{self, CandidateSet, ContextFrame, Source};
use crate::sealed_store::segments::SegmentCache;
use crate::sealed_store::SealedStore;
use crate::tee_sim::{self, Enclave, Measurement, MonotonicCounter, PlatformKey, SharedEnclave};

use super::config::ServiceConfig;
use super::embed::{Embedder, HashEmbedder};
use super::wire::{WireMessage, WireResponse};

/// Stands in for the enclave binary. Its hash, with the policy bundle's,
/// is the measurement clients pin.
pub const CODE_BUNDLE: &[u8] = concat!("memtrust-service/", env!("CARGO_PKG_VERSION")).as_bytes();
pub const DEFAULT_LABEL: &str = "default";
pub const DEFAULT_TOP_N: usize = 10;
pub const MAX_TOP_N: usize = 1000;
pub const AUDIT_FILE: &str = "audit.log";
pub const ANCHOR_FILE: &str = "transparency.log";
pub const TRACE_FILE: &str = "fetch.trace";
pub const PLATFORM_PUB_FILE: &str = "platform.pub";

const SEGMENT_BUDGET: usize = 64;

/// Allows every agent every action on every label.
pub fn default_policy() -> PolicyBundle {
    PolicyBundle::new(
        [Action::Remember, Action::Recall, Action::Forget, Action::Migrate]
            .into_iter()
            .map(|a| governance::Policy::allow("*", a, "*", 0))
            .collect(),
    )
}

pub fn load_policy(cfg: &ServiceConfig) -> Result<PolicyBundle> {
    match &cfg.policy_file {
        None => Ok(default_policy()),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::Config { line: 0, message: format!("{}: {e}", p.display()) })?;
            PolicyBundle::from_json(&bytes).map_err(|e| Error::Config { line: 0, message: format!("{}: {e}", p.display()) })
        }
    }
}

/// The measurement a service built from this crate reports under `policy`.
pub fn expected_measurement(policy: &PolicyBundle) -> Measurement {
    tee_sim::measure(CODE_BUNDLE, &policy.digest())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RememberRequest {
    pub text: String,
    #[serde(default)]
    pub source_app: String,
    #[serde(default)]
    pub intent: String,
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RememberResponse {
    pub episode_id: String,
}

fn default_top_n() -> usize {
    DEFAULT_TOP_N
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallRequest {
    pub query_text: String,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default)]
    pub entities: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgetRequest {
    pub unit_id: String,
}

/// The proof together with the audit chain up to the entry it names, so a
/// client can run `verify_deletion_proof` without further calls.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgetResponse {
    pub proof: DeletionProof,
    pub audit_chain: Vec<AuditEntry>,
}

/// Called with (episode id, attempt, bytes) just before a unit leaves for a
/// migration peer. Tests use it to corrupt data in transit.
pub type FaultHook = Arc<dyn Fn(&str, u32, &mut Vec<u8>) + Send + Sync>;

pub(crate) struct Indexes {
    pub bm25: InvertedIndex,
    pub hnsw: Hnsw,
    pub buckets: BucketStore,
}

/// Records a forget as the caller's own audit entry.
struct ActorRecorder<'a> {
    audit: &'a AuditLog,
    actor: &'a str,
    action: &'a str,
}

impl ShredRecorder for ActorRecorder<'_> {
    fn record_shred(&self, unit_id: &str) -> Result<Hash32> {
        Ok(self.audit.append(AuditEvent::new(self.actor, self.action, &format!("unit:{unit_id}"), "allow"))?.entry_hash)
    }
}

pub struct ServiceCore {
    pub(crate) cfg: ServiceConfig,
    pub(crate) enclave: SharedEnclave,
    vault: SharedVault,
    store: Arc<SealedStore>,
    queue: Arc<UpdateQueue>,
    pub(crate) engine: MemoryEngine,
    proxy: PrivacyProxy,
    policy: PolicyEngine,
    pub(crate) audit: AuditLog,
    anchor_path: PathBuf,
    embedder: Box<dyn Embedder>,
    pub(crate) index: RwLock<Indexes>,
    rng: Mutex<StdRng>,
    sessions: Mutex<HashMap<String, SessionContext>>,
    pub(crate) pins: Vec<Measurement>,
    pub(crate) peer_platforms: Vec<VerifyingKey>,
    trace: Option<FetchTrace>,
    trace_lock: Mutex<()>,
    pub(crate) fault: Mutex<Option<FaultHook>>,
    completion: Option<HttpClient>,
    last_consolidated: Mutex<u64>,
}

impl ServiceCore {
    /// Launches the enclave and opens (or creates) every store under
    /// `cfg.data_dir`. Indexes are rebuilt from the sealed episodes.
    pub fn open(cfg: ServiceConfig, clock: SharedClock) -> Result<Self> {
        let dir = cfg.data_dir.clone();
        fs::create_dir_all(&dir).map_err(Error::DurableWrite)?;
        let bundle = load_policy(&cfg)?;
        let platform = PlatformKey::load_or_create(&cfg.platform_key_path())?;
        let enclave: SharedEnclave = Arc::new(Enclave::launch(platform, CODE_BUNDLE, &bundle.digest(), clock.clone()));
        let policy = PolicyEngine::bind(bundle, CODE_BUNDLE, &enclave.measurement())?;
        crate::durable::atomic_write(&dir.join(PLATFORM_PUB_FILE), hex::encode(enclave.platform_public().as_bytes()).as_bytes())?;

        let mut pins = vec![enclave.measurement()];
        if let Some(p) = &cfg.pins_file {
            let text = fs::read_to_string(p).map_err(|e| Error::Config { line: 0, message: format!("{}: {e}", p.display()) })?;
            pins.extend(tee_sim::parse_pins(&text)?.into_iter().map(|r| r.measurement));
        }
        let mut peer_platforms = vec![enclave.platform_public()];
        peer_platforms.extend(cfg.peer_platform_keys.iter().filter_map(|k| tee_sim::parse_public_key(k)));

        let rules = {
            let mut r = match &cfg.rules_file {
                Some(p) => RuleSet::load(p)?,
                None => RuleSet::standard(&[]),
            };
            if !cfg.names.is_empty() {
                r.push_names("PERSON", &cfg.names)?;
            }
            Arc::new(r)
        };

        let vault: SharedVault = Arc::new(KeyVault::open(dir.join("vault"), enclave.clone())?);
        let cipher: Arc<dyn BlockCipher> = Arc::new(AesGcm);
        let counter = MonotonicCounter::open(dir.join("store.counter"))?;
        let store = Arc::new(SealedStore::open(dir.join("store"), enclave.clone(), vault.clone(), counter, cipher.clone())?);
        let mut rng = match cfg.seed {
            Some(s) => StdRng::seed_from_u64(s),
            None => StdRng::from_entropy(),
        };
        let queue = Arc::new(UpdateQueue::with_rng(store.clone(), cfg.queue, StdRng::from_rng(&mut rng).map_err(|e| Error::Key(e.to_string()))?)?);
        let engine = MemoryEngine::open(&dir.join("engine"), &dir.join("graph"), enclave.clone(), store.clone(), cipher, cfg.engine)?;
        let proxy = PrivacyProxy::new(enclave.clone(), rules, Some(dir.join("sessions")));
        let audit = AuditLog::open(dir.join(AUDIT_FILE), clock)?;
        let embedder: Box<dyn Embedder> = Box::new(HashEmbedder::new(vault.service_key("embedder")));

        let cache = Arc::new(SegmentCache::new(dir.join("segments"), enclave.clone(), SEGMENT_BUDGET));
        let mut buckets = BucketStore::new(cache, embedder.dim());
        let trace = cfg.fetch_trace.then(FetchTrace::default);
        buckets.set_trace(trace.clone());
        let params = HnswParams { ef_search: cfg.ef_search, ..HnswParams::default() };
        let hnsw = Hnsw::new(embedder.dim(), params, rng.gen());
        let completion = cfg.proxy_endpoint.as_ref().map(|e| HttpClient::new(e.clone(), cfg.proxy_timeout_ms));
        let anchor_path = dir.join(ANCHOR_FILE);
        publish_pin(&anchor_path, enclave.measurement(), enclave.now())?;

        let core = Self {
            cfg,
            enclave,
            vault,
            store,
            queue,
            engine,
            proxy,
            policy,
            audit,
            anchor_path,
            embedder,
            index: RwLock::new(Indexes { bm25: InvertedIndex::new(), hnsw, buckets }),
            rng: Mutex::new(rng),
            sessions: Mutex::new(HashMap::new()),
            pins,
            peer_platforms,
            trace,
            trace_lock: Mutex::new(()),
            fault: Mutex::new(None),
            completion,
            last_consolidated: Mutex::new(0),
        };
        core.rebuild_indexes()?;
        Ok(core)
    }

    fn rebuild_indexes(&self) -> Result<()> {
        for m in self.engine.metas() {
            let ep = self.engine.get(&m.episode_id)?;
            self.index_episode(&ep)?;
        }
        Ok(())
    }

    pub(crate) fn index_episode(&self, ep: &Episode) -> Result<()> {
        let v = self.embedder.embed(&ep.body.text);
        let mut idx = self.index.write();
        let mut rng = self.rng.lock();
        idx.bm25.add(ep.id(), &ep.body.text);
        idx.hnsw.insert(ep.id(), v.clone())?;
        idx.buckets.insert(ep.id(), v, &mut rng)?;
        Ok(())
    }

    pub(crate) fn unindex(&self, episode_id: &str) -> Result<()> {
        let mut idx = self.index.write();
        let mut rng = self.rng.lock();
        idx.bm25.remove(episode_id);
        idx.hnsw.remove(episode_id);
        idx.buckets.remove(episode_id, &mut rng)?;
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn enclave(&self) -> &SharedEnclave {
        &self.enclave
    }

    pub fn measurement(&self) -> Measurement {
        self.enclave.measurement()
    }

    pub fn platform_public(&self) -> VerifyingKey {
        self.enclave.platform_public()
    }

    pub fn vault(&self) -> &SharedVault {
        &self.vault
    }

    pub fn store(&self) -> &Arc<SealedStore> {
        &self.store
    }

    pub fn queue(&self) -> &Arc<UpdateQueue> {
        &self.queue
    }

    pub fn engine(&self) -> &MemoryEngine {
        &self.engine
    }

    pub fn policy_engine(&self) -> &PolicyEngine {
        &self.policy
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn anchor_path(&self) -> &std::path::Path {
        &self.anchor_path
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn trace_path(&self) -> PathBuf {
        self.cfg.data_dir.join(TRACE_FILE)
    }

    pub fn set_fault_hook(&self, hook: Option<FaultHook>) {
        *self.fault.lock() = hook;
    }

    // -- sessions ----------------------------------------------------------

    pub fn handshake(&self, hello: &ClientHello) -> Result<(SessionContext, ServerHello)> {
        let (ctx, sh) = ingest::handshake(&self.enclave, hello, self.cfg.ticket_ttl_secs)?;
        self.sessions.lock().insert(ctx.session_id.clone(), ctx.clone());
        Ok((ctx, sh))
    }

    pub fn session(&self, session_id: &str) -> Option<SessionContext> {
        self.sessions.lock().get(session_id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }

    pub fn end_session(&self, session_id: &str) -> Result<()> {
        self.sessions.lock().remove(session_id);
        self.proxy.end_session(session_id)
    }

    /// The actor a request acts as, taken from its validated ticket.
    pub fn authorize(&self, ctx: &SessionContext, ticket: Option<&Value>) -> Result<String> {
        let ticket = ticket.ok_or_else(|| Error::Denied("request carries no session ticket".into()))?;
        let ticket: SessionTicket =
            serde_json::from_value(ticket.clone()).map_err(|e| Error::Denied(format!("malformed session ticket: {e}")))?;
        if ticket.session_id != ctx.session_id {
            return Err(Error::Denied("ticket belongs to another session".into()));
        }
        let check = governance::validate_ticket(&ticket, &ctx.channel_key, &self.measurement(), &self.platform_public(), self.enclave.now());
        if !check.is_valid() {
            return Err(Error::Denied(format!("session ticket rejected: {}", check.reason())));
        }
        Ok(ticket.client_id)
    }

    fn audit_event(&self, actor: &str, action: Action, resource: &str, decision: &str) -> Result<AuditEntry> {
        self.audit.append(AuditEvent::new(actor, action.as_str(), resource, decision))
    }

    fn deny(&self, actor: &str, action: Action, resource: &str, rule: Option<String>) -> Error {
        if let Err(e) = self.audit_event(actor, action, resource, "deny") {
            return e;
        }
        Error::Denied(rule.unwrap_or_else(|| "no matching allow rule".into()))
    }

    // -- operations --------------------------------------------------------

    pub fn remember(&self, ctx: &SessionContext, actor: &str, req: RememberRequest) -> Result<RememberResponse> {
        let labels = if req.labels.is_empty() { vec![DEFAULT_LABEL.to_string()] } else { req.labels };
        if labels.iter().any(|l| l.is_empty()) {
            return Err(Error::InvalidInput("labels must be non-empty".into()));
        }
        for l in &labels {
            let d = self.policy.evaluate(&Request { actor, action: Action::Remember, resource: l });
            if !d.allowed() {
                return Err(self.deny(actor, Action::Remember, &format!("label:{l}"), d.rule_id));
            }
        }
        let sanitized = self.proxy.sanitize(&ctx.session_id, &req.text)?;
        let embedding = self.embedder.embed(&sanitized.text);
        let id = uuid::Uuid::new_v4().to_string();
        let ep = self.engine.new_episode(&id, actor, &labels[0], &req.source_app, &req.intent, &sanitized.text, embedding);
        let ack = self.queue.enqueue(&memory_engine::unit_id(&id), MemoryEngine::encode_body(&ep.body)?)?;
        if self.cfg.manual_ticks {
            loop {
                if let Some(r) = ack.try_get() {
                    r?;
                    break;
                }
                self.queue.tick()?;
            }
        } else {
            ack.wait()?;
        }
        self.engine.register(&ep)?;
        self.index_episode(&ep)?;
        self.audit_event(actor, Action::Remember, &format!("{}/{id}", labels[0]), "allow")?;
        Ok(RememberResponse { episode_id: id })
    }

    pub fn recall(&self, ctx: &SessionContext, actor: &str, req: RecallRequest) -> Result<ContextFrame> {
        if !self.policy.may_perform(actor, Action::Recall) {
            return Err(self.deny(actor, Action::Recall, "query", None));
        }
        let top_n = req.top_n.clamp(1, MAX_TOP_N);
        let pool = (top_n * 4).max(16);
        let query_id = hex::encode(crate::crypto::random_bytes::<8>());
        let query = self.proxy.sanitize(&ctx.session_id, &req.query_text)?.text;
        let mut seeds = Vec::with_capacity(req.entities.len());
        for e in &req.entities {
            seeds.push(self.proxy.sanitize(&ctx.session_id, e)?.text);
        }
        let q = self.embedder.embed(&query);

        let mut cands = CandidateSet::new();
        {
            let idx = self.index.read();
            cands.extend(Source::Keyword, idx.bm25.keyword_recall(&query, pool));
            let mut rng = self.rng.lock();
            let (hits, _) = idx.hnsw.search(&q, pool, self.cfg.ef_search.max(pool), self.cfg.noise_rho, &mut rng)?;
            if let Some(real) = hits.first().and_then(|(id, _)| idx.buckets.bucket_of(id)) {
                let fetched = idx.buckets.oblivious_fetch(real, self.cfg.k_anonymity, &query_id, &mut rng)?;
                for e in &fetched.entries {
                    cands.insert(&e.vector_id, Source::Vector, cosine(&q, &e.vector));
                }
            }
            cands.extend(Source::Vector, hits);
        }
        self.flush_trace()?;
        cands.extend(Source::Graph, self.graph_candidates(&seeds));

        cands.retain(|doc| match self.engine.meta(doc) {
            Some(m) => self.policy.evaluate(&Request { actor, action: Action::Recall, resource: &m.resource }).allowed(),
            None => false,
        });
        let metas: BTreeMap<String, u64> = self.engine.metas().into_iter().map(|m| (m.episode_id, m.timestamp)).collect();
        let mut frame = retrieval::fuse(&query_id, &cands, &self.cfg.weights, self.cfg.half_life_secs, self.enclave.now(), |d| {
            metas.get(d).copied()
        });
        frame.entries.truncate(top_n);
        frame.entries.retain_mut(|e| match self.engine.recall_promote(&e.doc_id) {
            Ok(ep) => {
                e.text = Some(ep.body.text);
                true
            }
            Err(Error::Shredded(_)) | Err(Error::NotFound(_)) => false,
            Err(err) => {
                log::error!("recall of {} failed: {err}", e.doc_id);
                false
            }
        });
        self.audit_event(actor, Action::Recall, &format!("query:{query_id}"), "allow")?;
        Ok(frame)
    }

    /// Profile-graph traversal, mapped back to the episodes each reached
    /// fact came from.
    fn graph_candidates(&self, seeds: &[String]) -> Vec<(String, f64)> {
        if seeds.is_empty() {
            return Vec::new();
        }
        let reached: BTreeMap<String, f64> =
            retrieval::graph_recall(&self.engine.profile_view(), seeds, self.cfg.max_hops).into_iter().collect();
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for f in self.engine.facts() {
            let s = reached.get(&f.subject).copied().unwrap_or(0.0).max(reached.get(&f.object).copied().unwrap_or(0.0));
            if s <= 0.0 {
                continue;
            }
            for p in &f.provenance {
                let e = out.entry(p.clone()).or_insert(0.0);
                *e = e.max(s);
            }
        }
        out.into_iter().collect()
    }

    fn flush_trace(&self) -> Result<()> {
        let Some(t) = &self.trace else { return Ok(()) };
        let _g = self.trace_lock.lock();
        let lines: Vec<String> = std::mem::take(&mut *t.lock());
        if lines.is_empty() {
            return Ok(());
        }
        let mut f = OpenOptions::new().create(true).append(true).open(self.trace_path())?;
        for l in lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }

    pub fn forget(&self, _ctx: &SessionContext, actor: &str, req: ForgetRequest) -> Result<ForgetResponse> {
        let id = req.unit_id.strip_prefix(memory_engine::EPISODE_PREFIX).unwrap_or(&req.unit_id).to_string();
        let resource = match self.engine.meta(&id) {
            Some(m) => m.resource,
            None if self.vault.is_shredded(&memory_engine::unit_id(&id)) => DEFAULT_LABEL.to_string(),
            None => return Err(Error::NotFound(format!("episode {id}"))),
        };
        let d = self.policy.evaluate(&Request { actor, action: Action::Forget, resource: &resource });
        if !d.allowed() {
            return Err(self.deny(actor, Action::Forget, &format!("episode:{id}"), d.rule_id));
        }
        let recorder = ActorRecorder { audit: &self.audit, actor, action: Action::Forget.as_str() };
        let proof = self.engine.forget(&id, &recorder)?;
        self.unindex(&id)?;
        governance::anchor_head(&self.audit, &self.enclave, &self.anchor_path)?;
        let mut audit_chain = self.audit.entries();
        let end = audit_chain.iter().position(|e| e.entry_hash == proof.audit_head_hash).map_or(0, |p| p + 1);
        audit_chain.truncate(end);
        Ok(ForgetResponse { proof, audit_chain })
    }

    /// The completion round trip through the privacy proxy, against the
    /// configured endpoint unless `client` is given.
    pub fn complete(&self, session_id: &str, prompt: &str, client: Option<&dyn CompletionClient>) -> Result<Unmasked> {
        let client: &dyn CompletionClient = match (client, &self.completion) {
            (Some(c), _) => c,
            (None, Some(h)) => h,
            (None, None) => return Err(Error::Upstream("no proxy.endpoint configured".into())),
        };
        self.proxy.proxy_complete(session_id, prompt, client)
    }

    /// Background maintenance: consolidates episodes seen since the last
    /// run, then decays and rewrites the store.
    pub fn maintain(&self) -> Result<SweepReport> {
        let now = self.enclave.now();
        let from = std::mem::replace(&mut *self.last_consolidated.lock(), now);
        self.engine.consolidate(from, now.saturating_add(1), &StubSummarizer)?;
        self.engine.decay_sweep(now)
    }

    /// Routes one request. Every well-formed request gets exactly one
    /// response carrying its id.
    pub fn dispatch(&self, ctx: &SessionContext, msg: &WireMessage) -> WireResponse {
        let r = (|| -> Result<Value> {
            let actor = self.authorize(ctx, msg.ticket.as_ref())?;
            let payload = msg.payload.clone();
            let bad = |e: serde_json::Error| Error::InvalidInput(format!("bad {} payload: {e}", msg.op));
            match msg.op.as_str() {
                "remember" => Ok(serde_json::to_value(self.remember(ctx, &actor, serde_json::from_value(payload).map_err(bad)?)?)?),
                "recall" => Ok(serde_json::to_value(self.recall(ctx, &actor, serde_json::from_value(payload).map_err(bad)?)?)?),
                "forget" => Ok(serde_json::to_value(self.forget(ctx, &actor, serde_json::from_value(payload).map_err(bad)?)?)?),
                "migrate" => Ok(serde_json::to_value(self.migrate(&actor, serde_json::from_value(payload).map_err(bad)?)?)?),
                op => Err(Error::Protocol(format!("op {op} is not valid inside a client session"))),
            }
        })();
        match r {
            Ok(v) => WireResponse::ok(msg.id, v),
            Err(e) => WireResponse::err(msg.id, &e),
        }
    }

    /// Drains pending writes, appends the closing anchor and returns it.
    pub fn shutdown(&self) -> Result<governance::AnchorRecord> {
        self.queue.drain()?;
        governance::anchor_head(&self.audit, &self.enclave, &self.anchor_path)
    }
}

/// Appends `<measurement> <timestamp>` to the transparency log unless the
/// measurement is already listed there.
fn publish_pin(anchor_path: &std::path::Path, m: Measurement, now: u64) -> Result<()> {
    let existing = match fs::read_to_string(anchor_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::DurableWrite(e)),
    };
    if tee_sim::parse_pins(&existing).unwrap_or_default().iter().any(|p| p.measurement == m) {
        return Ok(());
    }
    let line = tee_sim::PinnedRelease { measurement: m, released_at: now }.to_line();
    let mut f = OpenOptions::new().create(true).append(true).open(anchor_path).map_err(Error::DurableWrite)?;
    writeln!(f, "{line}").and_then(|_| f.sync_data()).map_err(Error::DurableWrite)
}

pub fn read_platform_public(data_dir: &std::path::Path) -> Result<VerifyingKey> {
    let p = data_dir.join(PLATFORM_PUB_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::Key(format!("{}: {e}", p.display())))?;
    tee_sim::parse_public_key(text.trim()).ok_or_else(|| Error::Key(format!("{} holds no public key", p.display())))
}
