//! Reference client: attests the server against pinned measurements before
//! sending anything but the hello, then speaks the encrypted wire.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::governance::SessionTicket;
use crate::ingest::{ClientHandshake, Role, SecureChannel, ServerHello};
use crate::keyvault::verify_deletion_proof;
use crate::retrieval::ContextFrame;
use crate::tee_sim::{self, Measurement};

use super::migration::{MigrateRequest, MigrationReport};
use super::service::{ForgetResponse, RecallRequest, RememberRequest, RememberResponse};
use super::wire::{Framed, WireMessage, WireResponse};

/// Accepted measurements and the platform key that signs reports.
#[derive(Clone, Debug)]
pub struct PinnedTrust {
    pub measurements: Vec<Measurement>,
    pub platform: VerifyingKey,
}

impl PinnedTrust {
    /// Reads a transparency-log pin file.
    pub fn from_pin_file(text: &str, platform: VerifyingKey) -> Result<Self> {
        let measurements: Vec<Measurement> = tee_sim::parse_pins(text)?.into_iter().map(|p| p.measurement).collect();
        if measurements.is_empty() {
            return Err(Error::Config { line: 0, message: "pin file lists no measurements".into() });
        }
        Ok(Self { measurements, platform })
    }
}

pub struct Client {
    framed: Framed<TcpStream>,
    ticket: SessionTicket,
    session_id: String,
    next_id: u64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, client_id: &str, trust: &PinnedTrust) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(120)))?;
        Self::over(stream, client_id, trust)
    }

    pub fn over(stream: TcpStream, client_id: &str, trust: &PinnedTrust) -> Result<Self> {
        let mut framed = Framed::new(stream);
        let hs = ClientHandshake::new(client_id);
        framed.send(&WireMessage::new("handshake", 0, serde_json::to_value(hs.hello())?).encode()?)?;
        let body = framed.recv()?.ok_or_else(|| Error::Protocol("server closed during handshake".into()))?;
        let sh: ServerHello = serde_json::from_value(WireResponse::decode(&body)?.into_result()?)?;
        let session = hs.finish(&sh, &trust.measurements, &trust.platform)?;
        framed.secure(SecureChannel::new(session.channel_key, Role::Client));
        Ok(Self { framed, ticket: session.ticket, session_id: session.session_id, next_id: 1 })
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn ticket(&self) -> &SessionTicket {
        &self.ticket
    }

    /// Sends one request and waits for the response with the same id.
    pub fn call(&mut self, op: &str, payload: Value) -> Result<Value> {
        let id = self.next_id;
        self.next_id += 1;
        let mut m = WireMessage::new(op, id, payload);
        m.ticket = Some(serde_json::to_value(&self.ticket)?);
        self.framed.send(&m.encode()?)?;
        let body = self.framed.recv()?.ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        let resp = WireResponse::decode(&body)?;
        if resp.id != id {
            return Err(Error::Protocol(format!("response id {} for request {id}", resp.id)));
        }
        resp.into_result()
    }

    fn typed<T: DeserializeOwned>(&mut self, op: &str, payload: Value) -> Result<T> {
        Ok(serde_json::from_value(self.call(op, payload)?)?)
    }

    pub fn remember(&mut self, text: &str, labels: &[&str]) -> Result<String> {
        let req = RememberRequest { text: text.into(), source_app: "memtrust-client".into(), intent: String::new(), labels: labels.iter().map(|s| s.to_string()).collect() };
        let r: RememberResponse = self.typed("remember", serde_json::to_value(req)?)?;
        Ok(r.episode_id)
    }

    pub fn recall(&mut self, query: &str, top_n: usize, entities: &[&str]) -> Result<ContextFrame> {
        let req = RecallRequest { query_text: query.into(), top_n, entities: entities.iter().map(|s| s.to_string()).collect() };
        self.typed("recall", serde_json::to_value(req)?)
    }

    /// Forgets and checks the returned proof locally.
    pub fn forget(&mut self, unit_id: &str, platform: &VerifyingKey) -> Result<(ForgetResponse, bool)> {
        let r: ForgetResponse = self.typed("forget", serde_json::json!({ "unit_id": unit_id }))?;
        let ok = verify_deletion_proof(&r.proof, platform, &r.audit_chain);
        Ok((r, ok))
    }

    pub fn migrate(&mut self, peer: &str, episode_ids: Option<Vec<String>>) -> Result<MigrationReport> {
        self.typed("migrate", serde_json::to_value(MigrateRequest { peer: peer.into(), episode_ids })?)
    }
}
