//! Frames are a 4-byte big-endian length followed by that many body bytes.
//! Request and response bodies are canonical JSON. After the handshake the
//! body is a sealed [`SecureChannel`] frame wrapping the canonical JSON.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical;
use crate::error::{Error, Result};
use crate::ingest::SecureChannel;

pub const MAX_BODY: usize = 16 << 20;

pub const OPS: &[&str] = &["handshake", "remember", "recall", "forget", "migrate", "migrate-hello", "migrate-attest", "migrate-unit", "migrate-commit", "migrate-done"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMessage {
    pub op: String,
    pub id: u64,
    #[serde(default)]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket: Option<Value>,
}

impl WireMessage {
    pub fn new(op: &str, id: u64, payload: Value) -> Self {
        Self { op: op.into(), id, payload, ticket: None }
    }

    /// Parses a body and rejects ops outside [`OPS`].
    pub fn decode(body: &[u8]) -> Result<Self> {
        let msg: Self = serde_json::from_slice(body).map_err(|e| Error::Protocol(format!("malformed request: {e}")))?;
        if !OPS.contains(&msg.op.as_str()) {
            return Err(Error::Protocol(format!("unknown op {:?}", msg.op)));
        }
        Ok(msg)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        canonical::to_canonical_vec(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after_ms: Option<u64>,
}

impl From<&Error> for WireError {
    fn from(e: &Error) -> Self {
        let retry_after_ms = match e {
            Error::Backpressure { retry_after_ms } => Some(*retry_after_ms),
            _ => None,
        };
        Self { code: e.code().into(), message: e.to_string(), retry_after_ms }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireResponse {
    pub id: u64,
    pub ok: bool,
    #[serde(default)]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl WireResponse {
    pub fn ok(id: u64, payload: Value) -> Self {
        Self { id, ok: true, payload, error: None }
    }

    pub fn err(id: u64, e: &Error) -> Self {
        Self { id, ok: false, payload: Value::Null, error: Some(e.into()) }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        canonical::to_canonical_vec(self)
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        serde_json::from_slice(body).map_err(|e| Error::Protocol(format!("malformed response: {e}")))
    }

    /// The payload, or the carried error mapped back onto a local one.
    pub fn into_result(self) -> Result<Value> {
        match self.error {
            None if self.ok => Ok(self.payload),
            None => Err(Error::Protocol("error response without error body".into())),
            Some(e) => Err(match e.code.as_str() {
                "denied" => Error::Denied(e.message),
                "not-found" => Error::NotFound(e.message),
                "retry-after" => Error::Backpressure { retry_after_ms: e.retry_after_ms.unwrap_or(0) },
                "attestation-violation" => Error::AttestationViolation(e.message),
                "shredded" => Error::Shredded(e.message),
                "migration" => Error::Migration(e.message),
                "invalid-input" => Error::InvalidInput(e.message),
                _ => Error::Protocol(format!("{}: {}", e.code, e.message)),
            }),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<()> {
    if body.len() > MAX_BODY {
        return Err(Error::Protocol(format!("frame body of {} bytes exceeds the 16 MiB limit", body.len())));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// `Ok(None)` on a clean end of stream before any length byte. A stream
/// that ends inside a frame, or announces more than 16 MiB, is a protocol
/// error.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_BODY {
        return Err(Error::Protocol(format!("announced body of {n} bytes exceeds the 16 MiB limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Protocol(format!("stream ended before the announced {n} body bytes")),
        _ => e.into(),
    })?;
    Ok(Some(body))
}

/// A framed stream, optionally wrapped in an established channel.
pub struct Framed<S> {
    stream: S,
    channel: Option<SecureChannel>,
}

impl<S: Read + Write> Framed<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, channel: None }
    }

    pub fn secure(&mut self, channel: SecureChannel) {
        self.channel = Some(channel);
    }

    pub fn is_secure(&self) -> bool {
        self.channel.is_some()
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    pub fn send(&mut self, body: &[u8]) -> Result<()> {
        match &mut self.channel {
            Some(ch) => {
                let sealed = ch.seal(body);
                write_frame(&mut self.stream, &sealed)
            }
            None => write_frame(&mut self.stream, body),
        }
    }

    pub fn recv(&mut self) -> Result<Option<Vec<u8>>> {
        let Some(frame) = read_frame(&mut self.stream)? else { return Ok(None) };
        match &mut self.channel {
            Some(ch) => ch.open(&frame).map(Some),
            None => Ok(Some(frame)),
        }
    }
}
