#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use memtrust::clock::SystemClock;
use memtrust::governance::PolicyBundle;
use memtrust::tee_sim::PlatformKey;
use memtrust::ump_service::service::ANCHOR_FILE;
use memtrust::ump_service::{PinnedTrust, Server, ServiceConfig, ServiceCore};

/// Config for an in-process node: ephemeral port, synchronous queue ticks,
/// fixed seed, fetch trace on, no background maintenance.
pub fn config(data_dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(data_dir);
    cfg.listen = "127.0.0.1:0".into();
    cfg.manual_ticks = true;
    cfg.seed = Some(11);
    cfg.fetch_trace = true;
    cfg.sweep_interval_secs = 0;
    cfg
}

pub fn start(cfg: ServiceConfig) -> Server {
    let core = ServiceCore::open(cfg, Arc::new(SystemClock)).expect("open core");
    Server::start(Arc::new(core)).expect("start server")
}

pub fn trust(server: &Server) -> PinnedTrust {
    let pins = std::fs::read_to_string(server.core().config().data_dir.join(ANCHOR_FILE)).unwrap();
    PinnedTrust::from_pin_file(&pins, server.core().platform_public()).unwrap()
}

/// Creates a platform key file and returns its path and hex public key.
pub fn platform_key(dir: &Path, name: &str) -> (PathBuf, String) {
    let p = dir.join(format!("{name}.key"));
    let k = PlatformKey::load_or_create(&p).unwrap();
    (p, hex::encode(k.public().as_bytes()))
}

pub fn write_policy(dir: &Path, bundle: &PolicyBundle) -> PathBuf {
    let p = dir.join("policy.json");
    std::fs::write(&p, bundle.canonical_bytes()).unwrap();
    p
}
