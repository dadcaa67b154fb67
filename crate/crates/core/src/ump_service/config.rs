//! Flat `key = value` service configuration.
//!
//! Blank lines and `#` comments are skipped. Unknown keys are rejected so a
//! typo never silently falls back to a default.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ingest::queue::{DEFAULT_BATCH_SIZE, DEFAULT_HIGH_WATER, DEFAULT_TICK_MS};
use crate::ingest::QueueConfig;
use crate::memory_engine::{EngineConfig, DEFAULT_ALPHA, DEFAULT_INITIAL_STRENGTH, DEFAULT_THETA};
use crate::retrieval::{FusionWeights, DEFAULT_HALF_LIFE_SECS};

pub const DATA_DIR_ENV: &str = "MEMTRUST_DATA_DIR";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:7411";
pub const DEFAULT_K_ANONYMITY: usize = 2;
pub const DEFAULT_NOISE_RHO: f64 = 0.1;
pub const DEFAULT_PROXY_TIMEOUT_MS: u64 = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub listen: String,
    pub queue: QueueConfig,
    /// Drive ingest ticks from request threads instead of the timer thread.
    pub manual_ticks: bool,
    pub k_anonymity: usize,
    pub noise_rho: f64,
    pub weights: FusionWeights,
    pub half_life_secs: f64,
    pub ef_search: usize,
    pub max_hops: usize,
    pub engine: EngineConfig,
    pub proxy_endpoint: Option<String>,
    pub proxy_timeout_ms: u64,
    /// Sanitizer rule file; the built-in rules apply when unset.
    pub rules_file: Option<PathBuf>,
    /// Names masked as PERSON in addition to any rule file.
    pub names: Vec<String>,
    pub policy_file: Option<PathBuf>,
    /// Transparency-log file of accepted peer measurements for migration.
    /// When unset only this build's own measurement is accepted.
    pub pins_file: Option<PathBuf>,
    /// Platform keys whose attestation reports are accepted from migration
    /// peers, in addition to this host's own.
    pub peer_platform_keys: Vec<String>,
    /// Defaults to `<data_dir>/platform.key`.
    pub platform_key_file: Option<PathBuf>,
    pub ticket_ttl_secs: u64,
    /// Seconds between background decay sweeps; 0 disables them.
    pub sweep_interval_secs: u64,
    /// Write one line per bucket fetch to `<data_dir>/fetch.trace`.
    pub fetch_trace: bool,
    pub seed: Option<u64>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            listen: DEFAULT_LISTEN.into(),
            queue: QueueConfig { batch_size: DEFAULT_BATCH_SIZE, tick_ms: DEFAULT_TICK_MS, high_water: DEFAULT_HIGH_WATER },
            manual_ticks: false,
            k_anonymity: DEFAULT_K_ANONYMITY,
            noise_rho: DEFAULT_NOISE_RHO,
            weights: FusionWeights::default(),
            half_life_secs: DEFAULT_HALF_LIFE_SECS as f64,
            ef_search: 64,
            max_hops: 2,
            engine: EngineConfig { alpha: DEFAULT_ALPHA, theta: DEFAULT_THETA, initial_strength: DEFAULT_INITIAL_STRENGTH },
            proxy_endpoint: None,
            proxy_timeout_ms: DEFAULT_PROXY_TIMEOUT_MS,
            rules_file: None,
            names: Vec::new(),
            policy_file: None,
            pins_file: None,
            peer_platform_keys: Vec::new(),
            platform_key_file: None,
            ticket_ttl_secs: crate::governance::DEFAULT_TICKET_TTL_SECS,
            sweep_interval_secs: 3600,
            fetch_trace: false,
            seed: None,
        }
    }

    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::new(base.join("data"));
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let err = |message: String| Error::Config { line: lineno, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let path = |v: &str| {
                let p = PathBuf::from(v);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            match key {
                "data_dir" => cfg.data_dir = path(value),
                "listen" => cfg.listen = value.to_string(),
                "ingest.tick_ms" => cfg.queue.tick_ms = positive(value).map_err(err)?,
                "ingest.batch_size" => cfg.queue.batch_size = positive(value).map_err(err)? as usize,
                "ingest.high_water" => cfg.queue.high_water = positive(value).map_err(err)? as usize,
                "ingest.manual_ticks" => cfg.manual_ticks = boolean(value).map_err(err)?,
                "retrieval.k_anonymity" => cfg.k_anonymity = positive(value).map_err(err)? as usize,
                "retrieval.noise_rho" => {
                    let rho = float(value).map_err(err)?;
                    if !(0.0..1.0).contains(&rho) {
                        return Err(err("retrieval.noise_rho must lie in [0, 1)".into()));
                    }
                    cfg.noise_rho = rho;
                }
                "retrieval.weights.keyword" => cfg.weights.keyword = weight(value).map_err(err)?,
                "retrieval.weights.vector" => cfg.weights.vector = weight(value).map_err(err)?,
                "retrieval.weights.graph" => cfg.weights.graph = weight(value).map_err(err)?,
                "retrieval.weights.recency" => cfg.weights.recency = weight(value).map_err(err)?,
                "retrieval.half_life_secs" => cfg.half_life_secs = positive(value).map_err(err)? as f64,
                "retrieval.ef_search" => cfg.ef_search = positive(value).map_err(err)? as usize,
                "retrieval.max_hops" => {
                    cfg.max_hops = value.parse().map_err(|_| err(format!("bad integer {value:?}")))?;
                }
                "retrieval.fetch_trace" => cfg.fetch_trace = boolean(value).map_err(err)?,
                "engine.alpha" => cfg.engine.alpha = float(value).map_err(err)?,
                "engine.theta" => cfg.engine.theta = float(value).map_err(err)?,
                "engine.initial_strength" => cfg.engine.initial_strength = float(value).map_err(err)?,
                "proxy.endpoint" => cfg.proxy_endpoint = Some(value.to_string()).filter(|v| !v.is_empty()),
                "proxy.timeout_ms" => cfg.proxy_timeout_ms = positive(value).map_err(err)?,
                "ingest.rules_file" => cfg.rules_file = Some(path(value)),
                "ingest.names" => {
                    cfg.names = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
                }
                "governance.policy_file" => cfg.policy_file = Some(path(value)),
                "governance.ticket_ttl_secs" => cfg.ticket_ttl_secs = positive(value).map_err(err)?,
                "attestation.pins_file" => cfg.pins_file = Some(path(value)),
                "attestation.platform_keys" => {
                    cfg.peer_platform_keys = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
                    if let Some(bad) = cfg.peer_platform_keys.iter().find(|k| crate::tee_sim::parse_public_key(k).is_none()) {
                        return Err(err(format!("bad platform public key {bad:?}")));
                    }
                }
                "tee.platform_key_file" => cfg.platform_key_file = Some(path(value)),
                "engine.sweep_interval_secs" => {
                    cfg.sweep_interval_secs = value.parse().map_err(|_| err(format!("bad integer {value:?}")))?;
                }
                "seed" => cfg.seed = Some(value.parse().map_err(|_| err(format!("bad seed {value:?}")))?),
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        let e = cfg.engine;
        if !(e.alpha > 0.0) || !(e.theta > 0.0 && e.theta < 1.0) || !(e.initial_strength > 0.0) {
            return Err(Error::Config { line: 0, message: "engine.alpha and engine.initial_strength must be positive, engine.theta in (0, 1)".into() });
        }
        Ok(cfg)
    }

    /// Reads the file and applies the data directory override from the
    /// environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config { line: 0, message: format!("{}: {e}", path.display()) })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        cfg.apply_env(std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
        Ok(cfg)
    }

    pub fn platform_key_path(&self) -> PathBuf {
        self.platform_key_file.clone().unwrap_or_else(|| self.data_dir.join("platform.key"))
    }

    pub fn apply_env(&mut self, data_dir: Option<PathBuf>) {
        if let Some(d) = data_dir.filter(|d| !d.as_os_str().is_empty()) {
            self.data_dir = d;
        }
    }
}

fn positive(v: &str) -> std::result::Result<u64, String> {
    match v.parse::<u64>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got {v:?}")),
    }
}

fn float(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| format!("expected a number, got {v:?}"))
}

fn weight(v: &str) -> std::result::Result<f64, String> {
    float(v).and_then(|w| if w >= 0.0 { Ok(w) } else { Err("weights must be non-negative".into()) })
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}
