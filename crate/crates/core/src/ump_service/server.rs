//! TCP front end: one thread per connection, handshake first, then
//! encrypted request frames until the client hangs up.

use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::governance::AnchorRecord;
use crate::ingest::{ClientHello, Role, SecureChannel};

use super::service::ServiceCore;
use super::wire::{Framed, WireMessage, WireResponse};

/// Per-connection record of decoded request ops, kept for tests that need
/// to see what a client put on the wire.
pub type FrameLog = Arc<Mutex<Vec<(u64, String)>>>;

pub struct Server {
    core: Arc<ServiceCore>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    ticker: Option<JoinHandle<()>>,
    maintenance: Option<JoinHandle<()>>,
    conns: Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>>,
    frames: FrameLog,
}

impl Server {
    /// Binds `cfg.listen` and starts accepting. Fails with an I/O error when
    /// the address is unavailable.
    pub fn start(core: Arc<ServiceCore>) -> Result<Self> {
        let listener = TcpListener::bind(&core.config().listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>> = Arc::default();
        let frames = FrameLog::default();
        let ticker = (!core.config().manual_ticks).then(|| core.queue().spawn_ticker(stop.clone()));
        let maintenance = (core.config().sweep_interval_secs > 0).then(|| {
            let (core, stop) = (core.clone(), stop.clone());
            thread::spawn(move || {
                let period = Duration::from_secs(core.config().sweep_interval_secs);
                let mut last = Instant::now();
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(Duration::from_millis(200));
                    if last.elapsed() >= period {
                        last = Instant::now();
                        if let Err(e) = core.maintain() {
                            log::error!("maintenance failed: {e}");
                        }
                    }
                }
            })
        });
        let accept = {
            let (core, stop, conns, frames) = (core.clone(), stop.clone(), conns.clone(), frames.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let Ok(handle_stream) = stream.try_clone() else { continue };
                    let (core, frames) = (core.clone(), frames.clone());
                    let h = thread::spawn(move || {
                        let peer = handle_stream.peer_addr().ok();
                        if let Err(e) = serve_connection(&core, handle_stream, &frames) {
                            log::info!("connection {peer:?} closed: {e}");
                        }
                    });
                    let mut c = conns.lock();
                    c.retain(|(_, h)| !h.is_finished());
                    c.push((stream, h));
                }
            })
        };
        log::info!("memtrust listening on {addr} measurement={}", core.measurement());
        Ok(Self { core, addr, stop, accept: Some(accept), ticker, maintenance, conns, frames })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn core(&self) -> &Arc<ServiceCore> {
        &self.core
    }

    pub fn frame_log(&self) -> FrameLog {
        self.frames.clone()
    }

    /// Stops accepting, closes live connections, drains the update queue and
    /// anchors the audit head.
    pub fn shutdown(mut self) -> Result<AnchorRecord> {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let conns: Vec<_> = self.conns.lock().drain(..).collect();
        for (s, h) in conns {
            let _ = s.shutdown(Shutdown::Both);
            let _ = h.join();
        }
        for h in [self.ticker.take(), self.maintenance.take()].into_iter().flatten() {
            let _ = h.join();
        }
        self.core.shutdown()
    }
}

/// Handshake (or migration hello) then request dispatch. Returns when the
/// peer closes or sends something that is not a well-formed frame.
pub fn serve_connection(core: &ServiceCore, stream: TcpStream, frames: &FrameLog) -> Result<()> {
    let mut framed = Framed::new(stream);
    let Some(body) = recv_or_report(&mut framed)? else { return Ok(()) };
    let first = match WireMessage::decode(&body) {
        Ok(m) => m,
        Err(e) => {
            let _ = framed.send(&WireResponse::err(0, &e).encode()?);
            return Err(e);
        }
    };
    frames.lock().push((first.id, first.op.clone()));
    match first.op.as_str() {
        "handshake" => {}
        "migrate-hello" => return core.serve_migration(&mut framed, first),
        op => {
            let e = Error::Protocol(format!("expected handshake, got {op}"));
            framed.send(&WireResponse::err(first.id, &e).encode()?)?;
            return Err(e);
        }
    }
    let hello: ClientHello = match serde_json::from_value(first.payload.clone()) {
        Ok(h) => h,
        Err(e) => {
            let e = Error::Protocol(format!("bad client hello: {e}"));
            framed.send(&WireResponse::err(first.id, &e).encode()?)?;
            return Err(e);
        }
    };
    let (ctx, sh) = match core.handshake(&hello) {
        Ok(x) => x,
        Err(e) => {
            framed.send(&WireResponse::err(first.id, &e).encode()?)?;
            return Err(e);
        }
    };
    framed.send(&WireResponse::ok(first.id, serde_json::to_value(&sh)?).encode()?)?;
    framed.secure(SecureChannel::new(ctx.channel_key, Role::Server));

    let result = (|| -> Result<()> {
        loop {
            let Some(body) = recv_or_report(&mut framed)? else { return Ok(()) };
            let msg = match WireMessage::decode(&body) {
                Ok(m) => m,
                Err(e) => {
                    // Answer with the request id when one can be recovered.
                    let id = serde_json::from_slice::<Value>(&body).ok().and_then(|v| v["id"].as_u64()).unwrap_or(0);
                    framed.send(&WireResponse::err(id, &e).encode()?)?;
                    continue;
                }
            };
            frames.lock().push((msg.id, msg.op.clone()));
            let resp = core.dispatch(&ctx, &msg);
            framed.send(&resp.encode()?)?;
        }
    })();
    core.end_session(&ctx.session_id)?;
    result
}

/// A frame that cannot be read is answered with a protocol error, best
/// effort, before the caller drops the connection.
fn recv_or_report(framed: &mut Framed<TcpStream>) -> Result<Option<Vec<u8>>> {
    match framed.recv() {
        Err(e @ Error::Protocol(_)) => {
            if let Ok(body) = WireResponse::err(0, &e).encode() {
                let _ = framed.send(&body);
            }
            let _ = framed.get_ref().shutdown(Shutdown::Both);
            Err(e)
        }
        r => r,
    }
}
