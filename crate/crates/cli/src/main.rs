use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ed25519_dalek::VerifyingKey;
use memtrust::clock::SystemClock;
use memtrust::governance;
use memtrust::tee_sim::{self, PinnedRelease};
use memtrust::ump_service::service::{self as svc, ServiceCore};
use memtrust::ump_service::{Client, PinnedTrust, Server, ServiceConfig};
use memtrust::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BIND: u8 = 3;
const EXIT_ATTESTATION: u8 = 4;

#[derive(Parser)]
#[command(name = "memtrust", version, about = "Zero-trust memory service")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the service until SIGINT or SIGTERM.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check an audit log against its transparency-log anchors.
    VerifyLog {
        log: PathBuf,
        anchors: PathBuf,
        /// Hex platform public key, or a file holding one. Defaults to
        /// platform.pub next to the log.
        #[arg(long)]
        platform_key: Option<String>,
    },
    /// Print the pin line for this build under a policy bundle.
    Measure {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Thin debug client. Prints responses as JSON.
    Client {
        #[arg(long, default_value = "127.0.0.1:7411")]
        addr: String,
        /// Transparency-log file listing accepted measurements.
        #[arg(long)]
        pins: PathBuf,
        #[arg(long)]
        platform_key: String,
        #[arg(long, default_value = "memtrust-cli")]
        id: String,
        #[command(subcommand)]
        op: ClientOp,
    },
}

#[derive(Subcommand)]
enum ClientOp {
    Remember {
        text: String,
        #[arg(long = "label")]
        labels: Vec<String>,
    },
    Recall {
        query: String,
        #[arg(long, default_value_t = svc::DEFAULT_TOP_N)]
        top_n: usize,
        #[arg(long = "entity")]
        entities: Vec<String>,
    },
    Forget {
        unit_id: String,
    },
    Migrate {
        peer: String,
        #[arg(long = "episode")]
        episodes: Vec<String>,
    },
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::AttestationViolation(_) => EXIT_ATTESTATION,
        _ => EXIT_FAILURE,
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("memtrust: {msg}");
    ExitCode::from(code)
}

fn read_key(arg: &str) -> Result<VerifyingKey, String> {
    let text = if Path::new(arg).is_file() { std::fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))? } else { arg.to_string() };
    tee_sim::parse_public_key(text.trim()).ok_or_else(|| format!("{arg}: not a platform public key"))
}

fn serve(config: &Path) -> ExitCode {
    let cfg = match ServiceConfig::load(config) {
        Ok(c) => c,
        Err(e) => return fail(exit_for(&e), e),
    };
    let core = match ServiceCore::open(cfg, Arc::new(SystemClock)) {
        Ok(c) => Arc::new(c),
        Err(e) => return fail(exit_for(&e), e),
    };
    let server = match Server::start(core) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_BIND, format!("bind failed: {e}")),
    };
    let (tx, rx) = mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        return fail(EXIT_FAILURE, format!("signal handler: {e}"));
    }
    println!("listening {} measurement {}", server.addr(), server.core().measurement());
    let _ = std::io::stdout().flush();
    let _ = rx.recv();
    match server.shutdown() {
        Ok(a) => {
            log::info!("shutdown anchored head {}", a.head_index);
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_FAILURE, format!("shutdown: {e}")),
    }
}

fn verify_log(log: &Path, anchors: &Path, key: Option<&str>) -> ExitCode {
    let pk = match key {
        Some(k) => read_key(k),
        None => svc::read_platform_public(log.parent().unwrap_or(Path::new("."))).map_err(|e| e.to_string()),
    };
    let pk = match pk {
        Ok(k) => k,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    match governance::verify_log_files(log, anchors, &pk) {
        Ok(r) if r.is_clean() => {
            println!("ok entries={} anchors={}", r.entries_checked, r.anchors_checked);
            ExitCode::SUCCESS
        }
        Ok(r) => {
            for i in &r.issues {
                println!("issue {i:?}");
            }
            println!("tampered entries={} first_bad={:?}", r.entries_checked, r.first_bad_index());
            ExitCode::from(EXIT_FAILURE)
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn measure(policy: Option<PathBuf>) -> ExitCode {
    let mut cfg = ServiceConfig::new(".");
    cfg.policy_file = policy;
    match svc::load_policy(&cfg) {
        Ok(b) => {
            let now = memtrust::clock::Clock::now(&SystemClock);
            println!("{}", PinnedRelease { measurement: svc::expected_measurement(&b), released_at: now }.to_line());
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn client(addr: &str, pins: &Path, key: &str, id: &str, op: ClientOp) -> ExitCode {
    let pk = match read_key(key) {
        Ok(k) => k,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let trust = match std::fs::read_to_string(pins).map_err(|e| Error::Config { line: 0, message: format!("{}: {e}", pins.display()) }).and_then(|t| PinnedTrust::from_pin_file(&t, pk)) {
        Ok(t) => t,
        Err(e) => return fail(exit_for(&e), e),
    };
    let run = || -> memtrust::Result<serde_json::Value> {
        let mut c = Client::connect(addr, id, &trust)?;
        Ok(match op {
            ClientOp::Remember { text, labels } => {
                let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
                serde_json::json!({ "episode_id": c.remember(&text, &labels)? })
            }
            ClientOp::Recall { query, top_n, entities } => {
                let entities: Vec<&str> = entities.iter().map(String::as_str).collect();
                serde_json::to_value(c.recall(&query, top_n, &entities)?)?
            }
            ClientOp::Forget { unit_id } => {
                let (r, verified) = c.forget(&unit_id, &pk)?;
                serde_json::json!({ "proof": r.proof, "verified": verified })
            }
            ClientOp::Migrate { peer, episodes } => serde_json::to_value(c.migrate(&peer, (!episodes.is_empty()).then_some(episodes))?)?,
        })
    };
    match run() {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Serve { config } => serve(&config),
        Cmd::VerifyLog { log, anchors, platform_key } => verify_log(&log, &anchors, platform_key.as_deref()),
        Cmd::Measure { policy } => measure(policy),
        Cmd::Client { addr, pins, platform_key, id, op } => client(&addr, &pins, &platform_key, &id, op),
    }
}
