//! Fixed-rate update pipeline.
//!
//! Producers enqueue sanitized writes; one consumer ticks at a fixed interval
//! and commits exactly `batch_size` objects per tick, topping up with chaff
//! when there is not enough real work.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::sealed_store::{ObjectHandle, PutRequest, SealedStore, MAX_OBJECT_LEN};

pub const DEFAULT_BATCH_SIZE: usize = 4;
pub const DEFAULT_TICK_MS: u64 = 250;
pub const DEFAULT_HIGH_WATER: usize = 1024;
/// Real lengths remembered for sizing chaff.
pub const LENGTH_WINDOW: usize = 256;
pub const FALLBACK_LEN: (usize, usize) = (200, 2000);
pub const CHAFF_PREFIX: &str = "chaff:";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueConfig {
    pub batch_size: usize,
    pub tick_ms: u64,
    pub high_water: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { batch_size: DEFAULT_BATCH_SIZE, tick_ms: DEFAULT_TICK_MS, high_water: DEFAULT_HIGH_WATER }
    }
}

pub type AckResult = std::result::Result<ObjectHandle, String>;

/// Resolves once the write has been committed by a tick.
pub struct Ack(mpsc::Receiver<AckResult>);

impl Ack {
    pub fn wait(self) -> Result<ObjectHandle> {
        match self.0.recv() {
            Ok(Ok(h)) => Ok(h),
            Ok(Err(msg)) => Err(Error::Integrity(format!("queued write failed: {msg}"))),
            Err(_) => Err(Error::Integrity("update queue stopped before the write committed".into())),
        }
    }

    pub fn try_get(&self) -> Option<Result<ObjectHandle>> {
        match self.0.try_recv() {
            Ok(Ok(h)) => Some(Ok(h)),
            Ok(Err(msg)) => Some(Err(Error::Integrity(format!("queued write failed: {msg}")))),
            Err(mpsc::TryRecvError::Empty) => None,
            Err(mpsc::TryRecvError::Disconnected) => Some(Err(Error::Integrity("update queue stopped".into()))),
        }
    }
}

struct Pending {
    unit_id: String,
    data: Vec<u8>,
    ack: mpsc::Sender<AckResult>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchEntry {
    pub unit_id: String,
    pub real: bool,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct UpdateBatch {
    pub tick_index: u64,
    /// In commit order.
    pub entries: Vec<BatchEntry>,
}

impl UpdateBatch {
    pub fn real_count(&self) -> usize {
        self.entries.iter().filter(|e| e.real).count()
    }
}

pub struct UpdateQueue {
    cfg: QueueConfig,
    store: Arc<SealedStore>,
    pending: Mutex<VecDeque<Pending>>,
    lengths: Mutex<VecDeque<usize>>,
    ticks: AtomicU64,
    rng: Mutex<StdRng>,
    /// Serializes consumers; there is one ticker in normal operation.
    consumer: Mutex<()>,
}

impl UpdateQueue {
    pub fn new(store: Arc<SealedStore>, cfg: QueueConfig) -> Result<Self> {
        Self::with_rng(store, cfg, StdRng::from_entropy())
    }

    pub fn with_rng(store: Arc<SealedStore>, cfg: QueueConfig, rng: StdRng) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        if cfg.tick_ms == 0 {
            return Err(Error::Domain("tick interval must be positive".into()));
        }
        Ok(Self {
            cfg,
            store,
            pending: Mutex::new(VecDeque::new()),
            lengths: Mutex::new(VecDeque::new()),
            ticks: AtomicU64::new(0),
            rng: Mutex::new(rng),
            consumer: Mutex::new(()),
        })
    }

    pub fn config(&self) -> QueueConfig {
        self.cfg
    }

    pub fn store(&self) -> &Arc<SealedStore> {
        &self.store
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().len()
    }

    pub fn ticks(&self) -> u64 {
        self.ticks.load(Ordering::SeqCst)
    }

    /// Non-blocking. Fails with backpressure at the high-water mark.
    pub fn enqueue(&self, unit_id: &str, data: Vec<u8>) -> Result<Ack> {
        if unit_id.starts_with(CHAFF_PREFIX) {
            return Err(Error::InvalidInput("unit ids with the chaff prefix are reserved".into()));
        }
        if data.len() > MAX_OBJECT_LEN {
            return Err(Error::InvalidInput(format!("object of {} bytes exceeds the 16 MiB limit", data.len())));
        }
        if self.store.vault().is_shredded(unit_id) {
            return Err(Error::Shredded(unit_id.to_string()));
        }
        let mut q = self.pending.lock();
        if q.len() >= self.cfg.high_water {
            let ticks_needed = (q.len() / self.cfg.batch_size) as u64 + 1;
            return Err(Error::Backpressure { retry_after_ms: ticks_needed * self.cfg.tick_ms });
        }
        if q.iter().any(|p| p.unit_id == unit_id) {
            return Err(Error::InvalidInput(format!("unit {unit_id} already has a queued write")));
        }
        let (tx, rx) = mpsc::channel();
        q.push_back(Pending { unit_id: unit_id.to_string(), data, ack: tx });
        Ok(Ack(rx))
    }

    fn chaff_len(&self, rng: &mut StdRng) -> usize {
        let lengths = self.lengths.lock();
        if lengths.is_empty() {
            rng.gen_range(FALLBACK_LEN.0..=FALLBACK_LEN.1)
        } else {
            lengths[rng.gen_range(0..lengths.len())]
        }
    }

    /// One tick: drains up to `batch_size` real writes, pads with chaff and
    /// commits the shuffled batch as a single store commit.
    pub fn tick(&self) -> Result<UpdateBatch> {
        let _c = self.consumer.lock();
        let real: Vec<Pending> = {
            let mut q = self.pending.lock();
            let n = q.len().min(self.cfg.batch_size);
            q.drain(..n).collect()
        };
        let mut rng = self.rng.lock();
        let mut reqs: Vec<(PutRequest, bool)> = Vec::with_capacity(self.cfg.batch_size);
        for p in &real {
            reqs.push((PutRequest::data(p.unit_id.clone(), p.data.clone()), true));
        }
        while reqs.len() < self.cfg.batch_size {
            let len = self.chaff_len(&mut rng);
            let mut body = vec![0u8; len];
            rng.fill_bytes(&mut body);
            let id = format!("{CHAFF_PREFIX}{}", hex::encode(rng.gen::<[u8; 16]>()));
            reqs.push((PutRequest::chaff(id, body), false));
        }
        reqs.shuffle(&mut *rng);
        drop(rng);
        let entries: Vec<BatchEntry> =
            reqs.iter().map(|(r, real)| BatchEntry { unit_id: r.unit_id.clone(), real: *real, len: r.data.len() }).collect();
        let tick_index = self.ticks.fetch_add(1, Ordering::SeqCst);
        match self.store.put_batch(reqs.into_iter().map(|(r, _)| r).collect()) {
            Ok(handles) => {
                let seen: HashSet<&str> = real.iter().map(|p| p.unit_id.as_str()).collect();
                let mut lengths = self.lengths.lock();
                for p in &real {
                    lengths.push_back(p.data.len());
                    if lengths.len() > LENGTH_WINDOW {
                        lengths.pop_front();
                    }
                }
                drop(lengths);
                for h in handles.into_iter().filter(|h| seen.contains(h.unit_id.as_str())) {
                    if let Some(p) = real.iter().find(|p| p.unit_id == h.unit_id) {
                        let _ = p.ack.send(Ok(h));
                    }
                }
                Ok(UpdateBatch { tick_index, entries })
            }
            Err(e) => {
                for p in &real {
                    let _ = p.ack.send(Err(e.to_string()));
                }
                Err(e)
            }
        }
    }

    /// Ticks until nothing real is pending. Used on shutdown.
    pub fn drain(&self) -> Result<u64> {
        let mut n = 0;
        while self.pending_len() > 0 {
            self.tick()?;
            n += 1;
        }
        Ok(n)
    }

    /// Runs `tick` every `tick_ms` until `stop` is set.
    pub fn spawn_ticker(self: &Arc<Self>, stop: Arc<AtomicBool>) -> thread::JoinHandle<()> {
        let q = Arc::clone(self);
        thread::spawn(move || {
            let period = Duration::from_millis(q.cfg.tick_ms);
            while !stop.load(Ordering::SeqCst) {
                let started = std::time::Instant::now();
                if let Err(e) = q.tick() {
                    log::error!("ingest tick failed: {e}");
                }
                if let Some(rest) = period.checked_sub(started.elapsed()) {
                    thread::sleep(rest);
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sealed_store::tests::Fixture;
    use crate::sealed_store::{ObjectKind, TraceEvent, WriteTrace};
    use rand_distr::{Distribution, Poisson};

    fn queue(batch: usize, high_water: usize) -> (Fixture, Arc<UpdateQueue>, WriteTrace) {
        let fx = Fixture::new();
        let store = Arc::new(Fixture::open_store(fx.dir.path(), &fx.enclave, &fx.vault, fx.cipher.clone()).unwrap());
        let trace: WriteTrace = Default::default();
        store.set_trace(Some(trace.clone()));
        let cfg = QueueConfig { batch_size: batch, tick_ms: 10, high_water };
        let q = Arc::new(UpdateQueue::with_rng(store, cfg, StdRng::seed_from_u64(9)).unwrap());
        (fx, q, trace)
    }

    /// Object writes between consecutive commits.
    fn writes_per_commit(trace: &WriteTrace) -> Vec<usize> {
        let mut out = Vec::new();
        let mut n = 0;
        for ev in trace.lock().iter() {
            match ev {
                TraceEvent::ObjectPut => n += 1,
                TraceEvent::Commit { .. } => {
                    out.push(n);
                    n = 0;
                }
                _ => {}
            }
        }
        out
    }

    #[test]
    fn idle_tick_writes_only_chaff() {
        let (_fx, q, trace) = queue(4, 16);
        let b = q.tick().unwrap();
        assert_eq!(b.entries.len(), 4);
        assert_eq!(b.real_count(), 0);
        assert_eq!(writes_per_commit(&trace), vec![4]);
        assert_eq!(q.store().count_kind(ObjectKind::Chaff), 4);
        assert!(b.entries.iter().all(|e| (FALLBACK_LEN.0..=FALLBACK_LEN.1).contains(&e.len)));
    }

    #[test]
    fn partial_batch_is_padded_and_shuffled() {
        let (_fx, q, _) = queue(4, 16);
        let mut positions = HashSet::new();
        for i in 0..40 {
            let a = q.enqueue(&format!("ep-{i}-a"), vec![1; 300]).unwrap();
            let b = q.enqueue(&format!("ep-{i}-b"), vec![2; 300]).unwrap();
            let batch = q.tick().unwrap();
            assert_eq!(batch.entries.len(), 4);
            assert_eq!(batch.real_count(), 2);
            positions.extend(batch.entries.iter().enumerate().filter(|(_, e)| e.real).map(|(i, _)| i));
            assert_eq!(a.wait().unwrap().unit_id, format!("ep-{i}-a"));
            assert_eq!(q.store().get_unit(&format!("ep-{i}-b")).unwrap(), vec![2; 300]);
            drop(b);
        }
        assert_eq!(positions.len(), 4, "real entries land in every slot");
    }

    #[test]
    fn chaff_lengths_follow_real_lengths() {
        let (_fx, q, _) = queue(4, 16);
        q.enqueue("ep", vec![0; 777]).unwrap();
        q.tick().unwrap();
        let b = q.tick().unwrap();
        assert!(b.entries.iter().all(|e| e.len == 777));
    }

    #[test]
    fn backpressure_at_high_water() {
        let (_fx, q, _) = queue(2, 3);
        for i in 0..3 {
            q.enqueue(&format!("e{i}"), vec![0; 10]).unwrap();
        }
        match q.enqueue("e3", vec![0; 10]) {
            Err(Error::Backpressure { retry_after_ms }) => assert_eq!(retry_after_ms, 20),
            Err(e) => panic!("unexpected {e}"),
            Ok(_) => panic!("expected backpressure"),
        }
        assert_eq!(q.drain().unwrap(), 2);
        assert!(q.enqueue("e3", vec![0; 10]).is_ok());
    }

    #[test]
    fn rejects_reserved_and_duplicate_ids() {
        let (_fx, q, _) = queue(2, 8);
        assert!(q.enqueue("chaff:x", vec![]).is_err());
        q.enqueue("a", vec![]).unwrap();
        assert!(q.enqueue("a", vec![]).is_err());
        assert!(matches!(UpdateQueue::with_rng(q.store().clone(), QueueConfig { batch_size: 0, ..Default::default() }, StdRng::seed_from_u64(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn bursty_arrivals_keep_constant_cadence() {
        let (_fx, q, trace) = queue(4, 10_000);
        let mut rng = StdRng::seed_from_u64(77);
        let poisson = Poisson::new(3.0f64).unwrap();
        let mut id = 0;
        for t in 0..150 {
            let burst = if t % 25 == 0 { 12 } else { poisson.sample(&mut rng) as usize };
            for _ in 0..burst {
                q.enqueue(&format!("ep-{id}"), vec![7; 100 + id % 900]).unwrap();
                id += 1;
            }
            q.tick().unwrap();
        }
        let counts = writes_per_commit(&trace);
        assert_eq!(counts.len(), 150);
        assert!(counts.iter().all(|&c| c == 4), "{counts:?}");
    }

    #[test]
    fn ticker_thread_commits_writes() {
        let (_fx, q, _) = queue(4, 16);
        let stop = Arc::new(AtomicBool::new(false));
        let h = q.spawn_ticker(stop.clone());
        let ack = q.enqueue("threaded", b"hello".to_vec()).unwrap();
        assert_eq!(ack.wait().unwrap().len, 5);
        stop.store(true, Ordering::SeqCst);
        h.join().unwrap();
        assert!(q.ticks() >= 1);
    }
}
