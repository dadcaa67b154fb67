//! Attested session handshake and the encrypted channel that follows it.
//!
//! The client sends a fresh nonce and an ephemeral X25519 key. The server
//! answers with an attestation report over that nonce, its own ephemeral key,
//! a platform signature binding both keys to the nonce, and a session ticket
//! bound to the derived channel key. The client checks the report against its
//! pinned measurements before sending anything else.

use ed25519_dalek::VerifyingKey;
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use x25519_dalek::{PublicKey, StaticSecret};

use crate::crypto::{self, Key32, Nonce12};
use crate::error::{Error, Result};
use crate::governance::{self, SessionTicket};
use crate::hexser;
use crate::tee_sim::{self, AttestationReport, Enclave, Measurement};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientHello {
    #[serde(with = "hexser")]
    pub nonce: [u8; 32],
    #[serde(with = "hexser")]
    pub client_pubkey: [u8; 32],
    #[serde(default = "anonymous")]
    pub client_id: String,
}

fn anonymous() -> String {
    "anonymous".into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerHello {
    pub session_id: String,
    pub report: AttestationReport,
    #[serde(with = "hexser")]
    pub server_pubkey: [u8; 32],
    /// Platform signature over the nonce and both ephemeral keys.
    #[serde(with = "hexser")]
    pub binding_signature: [u8; 64],
    pub ticket: SessionTicket,
}

#[derive(Clone)]
pub struct SessionContext {
    pub session_id: String,
    pub client_id: String,
    pub client_nonce: [u8; 32],
    pub channel_key: Key32,
    pub established_at: u64,
    pub report: AttestationReport,
    pub ticket: SessionTicket,
}

impl std::fmt::Debug for SessionContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionContext")
            .field("session_id", &self.session_id)
            .field("client_id", &self.client_id)
            .field("established_at", &self.established_at)
            .finish_non_exhaustive()
    }
}

pub fn binding_bytes(nonce: &[u8; 32], client_pub: &[u8; 32], server_pub: &[u8; 32]) -> Vec<u8> {
    let mut m = b"memtrust-hello-v1".to_vec();
    m.extend_from_slice(nonce);
    m.extend_from_slice(client_pub);
    m.extend_from_slice(server_pub);
    m
}

pub fn derive_channel_key(shared: &[u8; 32], client_nonce: &[u8; 32]) -> Key32 {
    crypto::hkdf32(shared, client_nonce, b"memtrust channel")
}

/// Server side. Returns the session and the hello to send back.
pub fn handshake(enclave: &Enclave, hello: &ClientHello, ticket_ttl_secs: u64) -> Result<(SessionContext, ServerHello)> {
    let client_pub = PublicKey::from(hello.client_pubkey);
    if client_pub.as_bytes().iter().all(|&b| b == 0) {
        return Err(Error::Protocol("client ephemeral key is the identity point".into()));
    }
    let secret = StaticSecret::random_from_rng(OsRng);
    let server_pub = PublicKey::from(&secret).to_bytes();
    let shared = secret.diffie_hellman(&client_pub);
    if !shared.was_contributory() {
        return Err(Error::Protocol("client ephemeral key is low order".into()));
    }
    let channel_key = derive_channel_key(shared.as_bytes(), &hello.nonce);
    let report = enclave.report(hello.nonce)?;
    let session_id = hex::encode(crypto::random_bytes::<16>());
    let ticket = governance::issue_ticket(enclave, &session_id, &hello.client_id, &channel_key, ticket_ttl_secs);
    let binding_signature = enclave.sign(&binding_bytes(&hello.nonce, &hello.client_pubkey, &server_pub));
    let ctx = SessionContext {
        session_id: session_id.clone(),
        client_id: hello.client_id.clone(),
        client_nonce: hello.nonce,
        channel_key,
        established_at: enclave.now(),
        report: report.clone(),
        ticket: ticket.clone(),
    };
    Ok((ctx, ServerHello { session_id, report, server_pubkey: server_pub, binding_signature, ticket }))
}

/// Reference client: what a well-behaved SDK does.
pub struct ClientHandshake {
    secret: StaticSecret,
    hello: ClientHello,
}

pub struct ClientSession {
    pub session_id: String,
    pub channel_key: Key32,
    pub ticket: SessionTicket,
    pub measurement: Measurement,
}

impl ClientHandshake {
    pub fn new(client_id: &str) -> Self {
        let secret = StaticSecret::random_from_rng(OsRng);
        let hello = ClientHello {
            nonce: crypto::random_bytes(),
            client_pubkey: PublicKey::from(&secret).to_bytes(),
            client_id: client_id.to_string(),
        };
        Self { secret, hello }
    }

    pub fn hello(&self) -> &ClientHello {
        &self.hello
    }

    /// Verifies the server hello against `pins` and `platform`, then derives
    /// the channel key.
    pub fn finish(self, sh: &ServerHello, pins: &[Measurement], platform: &VerifyingKey) -> Result<ClientSession> {
        if !pins.contains(&sh.report.measurement) {
            return Err(Error::AttestationViolation(format!("measurement {} is not pinned", sh.report.measurement)));
        }
        if !tee_sim::verify_report(&sh.report, &sh.report.measurement, &self.hello.nonce, platform) {
            return Err(Error::AttestationViolation("report does not verify for this nonce".into()));
        }
        let binding = binding_bytes(&self.hello.nonce, &self.hello.client_pubkey, &sh.server_pubkey);
        if !tee_sim::verify_signature(platform, &binding, &sh.binding_signature) {
            return Err(Error::AttestationViolation("ephemeral key binding does not verify".into()));
        }
        let shared = self.secret.diffie_hellman(&PublicKey::from(sh.server_pubkey));
        if !shared.was_contributory() {
            return Err(Error::AttestationViolation("server ephemeral key is low order".into()));
        }
        Ok(ClientSession {
            session_id: sh.session_id.clone(),
            channel_key: derive_channel_key(shared.as_bytes(), &self.hello.nonce),
            ticket: sh.ticket.clone(),
            measurement: sh.report.measurement,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// AES-GCM framing after the handshake. Each direction numbers its frames;
/// a frame out of sequence is rejected, which also stops replays.
pub struct SecureChannel {
    key: Key32,
    role: Role,
    sent: u64,
    received: u64,
}

impl SecureChannel {
    pub fn new(key: Key32, role: Role) -> Self {
        Self { key, role, sent: 0, received: 0 }
    }

    fn nonce(dir: u8, n: u64) -> Nonce12 {
        let mut nonce = [0u8; 12];
        nonce[0] = dir;
        nonce[4..].copy_from_slice(&n.to_be_bytes());
        nonce
    }

    fn dir_out(&self) -> u8 {
        match self.role {
            Role::Client => 1,
            Role::Server => 2,
        }
    }

    pub fn seal(&mut self, body: &[u8]) -> Vec<u8> {
        let nonce = Self::nonce(self.dir_out(), self.sent);
        self.sent += 1;
        let mut out = nonce.to_vec();
        out.extend(crypto::aead_encrypt(&self.key, &nonce, b"memtrust-frame", body));
        out
    }

    pub fn open(&mut self, frame: &[u8]) -> Result<Vec<u8>> {
        if frame.len() < 12 + crypto::TAG_LEN {
            return Err(Error::Protocol("encrypted frame too short".into()));
        }
        let dir_in = 3 - self.dir_out();
        let expected = Self::nonce(dir_in, self.received);
        if frame[..12] != expected {
            return Err(Error::Protocol("frame out of sequence".into()));
        }
        let body = crypto::aead_decrypt(&self.key, &expected, b"memtrust-frame", &frame[12..])
            .map_err(|_| Error::Protocol("frame failed authentication".into()))?;
        self.received += 1;
        Ok(body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, MockClock};
    use crate::governance::TicketCheck;
    use crate::tee_sim::PlatformKey;
    use std::sync::Arc;

    fn enclave(policy: &[u8]) -> (Enclave, MockClock) {
        let clock = MockClock::new(10_000);
        (Enclave::launch(PlatformKey::from_secret([6; 32]), b"code", policy, Arc::new(clock.clone())), clock)
    }

    #[test]
    fn honest_client_establishes_matching_keys() {
        let (e, clock) = enclave(b"p");
        let c = ClientHandshake::new("agent-a");
        let (ctx, sh) = handshake(&e, c.hello(), 900).unwrap();
        assert_eq!(ctx.report.nonce, c.hello().nonce);
        let s = c.finish(&sh, &[e.measurement()], &e.platform_public()).unwrap();
        assert_eq!(s.channel_key, ctx.channel_key);
        let check = governance::validate_ticket(&s.ticket, &ctx.channel_key, &e.measurement(), &e.platform_public(), clock.now());
        assert_eq!(check, TicketCheck::Valid);
    }

    #[test]
    fn unpinned_measurement_aborts() {
        let (e, _) = enclave(b"modified policy");
        let c = ClientHandshake::new("a");
        let (_, sh) = handshake(&e, c.hello(), 900).unwrap();
        let expected = tee_sim::measure(b"code", b"p");
        assert!(matches!(c.finish(&sh, &[expected], &e.platform_public()), Err(Error::AttestationViolation(_))));
    }

    #[test]
    fn replayed_server_hello_rejected() {
        let (e, _) = enclave(b"p");
        let first = ClientHandshake::new("a");
        let (_, old) = handshake(&e, first.hello(), 900).unwrap();
        let fresh = ClientHandshake::new("a");
        assert!(matches!(fresh.finish(&old, &[e.measurement()], &e.platform_public()), Err(Error::AttestationViolation(_))));
    }

    #[test]
    fn swapped_server_key_rejected() {
        let (e, _) = enclave(b"p");
        let c = ClientHandshake::new("a");
        let (_, mut sh) = handshake(&e, c.hello(), 900).unwrap();
        sh.server_pubkey = PublicKey::from(&StaticSecret::random_from_rng(OsRng)).to_bytes();
        assert!(c.finish(&sh, &[e.measurement()], &e.platform_public()).is_err());
    }

    #[test]
    fn identity_point_rejected() {
        let (e, _) = enclave(b"p");
        let hello = ClientHello { nonce: [1; 32], client_pubkey: [0; 32], client_id: "x".into() };
        assert!(matches!(handshake(&e, &hello, 900), Err(Error::Protocol(_))));
    }

    #[test]
    fn channel_round_trip_and_replay() {
        let key = [3u8; 32];
        let mut client = SecureChannel::new(key, Role::Client);
        let mut server = SecureChannel::new(key, Role::Server);
        let f1 = client.seal(b"one");
        let f2 = client.seal(b"two");
        assert_eq!(server.open(&f1).unwrap(), b"one");
        assert!(server.open(&f1).is_err(), "replay");
        assert_eq!(server.open(&f2).unwrap(), b"two");
        let back = server.seal(b"reply");
        assert_eq!(client.open(&back).unwrap(), b"reply");
        // A frame reflected back to its sender fails.
        let mut c2 = SecureChannel::new(key, Role::Client);
        let own = c2.seal(b"x");
        assert!(c2.open(&own).is_err());
    }

    #[test]
    fn hello_json_round_trip() {
        let c = ClientHandshake::new("a");
        let json = serde_json::to_string(c.hello()).unwrap();
        assert_eq!(&serde_json::from_str::<ClientHello>(&json).unwrap(), c.hello());
        assert!(serde_json::from_str::<ClientHello>(r#"{"nonce":"00"}"#).is_err());
    }
}
