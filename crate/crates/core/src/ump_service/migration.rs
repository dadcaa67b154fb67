//! Service-to-service migration.
//!
//! The source opens a connection to the destination and both sides attest:
//! the destination answers the source's nonce with its report (checked
//! against the source's pins), then the source answers the destination's
//! challenge over the new channel (checked against the destination's pins).
//! Only then do units move, each sealed under the ephemeral channel key and
//! re-encrypted under destination keys on arrival.
//!
//! A unit is staged at the destination, outside its active set, until the
//! digest matches. The source then shreds its copy and tells the destination
//! to commit, so the unit is never live on both ends.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::crypto::{self, Hash32};
use crate::error::{Error, Result};
use crate::governance::{Action, AuditEvent, Request};
use crate::hexser;
use crate::ingest::handshake::binding_bytes;
use crate::ingest::{self, ClientHandshake, ClientHello, Role, SecureChannel, ServerHello};
use crate::keyvault::ShredRecorder;
use crate::memory_engine::{self, Episode, EpisodeBody, EpisodeMeta, MemoryEngine, MemoryTier};
use crate::tee_sim::{self, AttestationReport, Measurement};

use super::service::ServiceCore;
use super::wire::{Framed, WireMessage, WireResponse};

/// Each unit gets one retry after a digest mismatch.
pub const MAX_ATTEMPTS: u32 = 2;
const IO_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrateRequest {
    /// `host:port` of the destination service.
    pub peer: String,
    /// Episodes to move; every episode the caller may migrate when absent.
    #[serde(default)]
    pub episode_ids: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub unit_id: String,
    pub block_count: u32,
    #[serde(with = "hexser")]
    pub digest: Hash32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MigrationStatus {
    Complete,
    Partial,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub peer_measurement: Measurement,
    pub manifest: Vec<ManifestEntry>,
    pub verified: Vec<String>,
    pub failed: Vec<String>,
    pub status: MigrationStatus,
}

#[derive(Serialize, Deserialize)]
struct HelloReply {
    server: ServerHello,
    #[serde(with = "hexser")]
    challenge: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct Attest {
    report: AttestationReport,
    #[serde(with = "hexser")]
    binding_signature: [u8; 64],
}

#[derive(Serialize, Deserialize)]
struct UnitTransfer {
    meta: EpisodeMeta,
    data: String,
    #[serde(with = "hexser")]
    digest: Hash32,
    block_count: u32,
}

struct SystemRecorder<'a>(&'a ServiceCore, &'a str);

impl ShredRecorder for SystemRecorder<'_> {
    fn record_shred(&self, unit_id: &str) -> Result<Hash32> {
        Ok(self.0.audit.append(AuditEvent::new("system", "migrate-out", &format!("unit:{unit_id} peer:{}", self.1), "allow"))?.entry_hash)
    }
}

fn platform_for<'a>(keys: &'a [VerifyingKey], report: &AttestationReport) -> Option<&'a VerifyingKey> {
    keys.iter().find(|k| tee_sim::key_id(k) == report.platform_key_id)
}

struct Peer<S> {
    framed: Framed<S>,
    next_id: u64,
}

impl<S: Read + Write> Peer<S> {
    fn call(&mut self, op: &str, payload: Value) -> Result<Value> {
        let id = self.next_id;
        self.next_id += 1;
        self.framed.send(&WireMessage::new(op, id, payload).encode()?)?;
        let body = self.framed.recv()?.ok_or_else(|| Error::Migration("peer closed the connection".into()))?;
        let resp = WireResponse::decode(&body)?;
        if resp.id != id {
            return Err(Error::Protocol(format!("response id {} for request {id}", resp.id)));
        }
        resp.into_result()
    }
}

impl ServiceCore {
    /// Source side of a migration.
    pub fn migrate(&self, actor: &str, req: MigrateRequest) -> Result<MigrationReport> {
        if !self.policy_allows(actor, Action::Migrate, None) {
            return Err(self.deny_migrate(actor, &req.peer, None));
        }
        let ids: Vec<String> = match &req.episode_ids {
            Some(ids) => {
                let mut out = Vec::with_capacity(ids.len());
                for raw in ids {
                    let id = raw.strip_prefix(memory_engine::EPISODE_PREFIX).unwrap_or(raw).to_string();
                    let m = self.engine.meta(&id).ok_or_else(|| Error::NotFound(format!("episode {id}")))?;
                    if !self.policy_allows(actor, Action::Migrate, Some(&m.resource)) {
                        return Err(self.deny_migrate(actor, &req.peer, Some(&id)));
                    }
                    out.push(id);
                }
                out
            }
            None => self
                .engine
                .metas()
                .into_iter()
                .filter(|m| self.policy_allows(actor, Action::Migrate, Some(&m.resource)))
                .map(|m| m.episode_id)
                .collect(),
        };
        let stream = TcpStream::connect(&req.peer).map_err(|e| Error::Migration(format!("connect {}: {e}", req.peer)))?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_write_timeout(Some(IO_TIMEOUT))?;
        let report = self.migrate_over(stream, &req.peer, &ids)?;
        self.audit.append(AuditEvent::new(actor, Action::Migrate.as_str(), &format!("peer:{}", req.peer), "allow"))?;
        Ok(report)
    }

    fn policy_allows(&self, actor: &str, action: Action, resource: Option<&str>) -> bool {
        match resource {
            None => self.policy_engine().may_perform(actor, action),
            Some(r) => self.policy_engine().evaluate(&Request { actor, action, resource: r }).allowed(),
        }
    }

    fn deny_migrate(&self, actor: &str, peer: &str, episode: Option<&str>) -> Error {
        let resource = match episode {
            Some(e) => format!("peer:{peer} episode:{e}"),
            None => format!("peer:{peer}"),
        };
        if let Err(e) = self.audit.append(AuditEvent::new(actor, Action::Migrate.as_str(), &resource, "deny")) {
            return e;
        }
        Error::Denied("migration not permitted".into())
    }

    /// Runs the source protocol over an already connected stream.
    pub fn migrate_over<S: Read + Write>(&self, stream: S, peer_name: &str, ids: &[String]) -> Result<MigrationReport> {
        let mut peer = Peer { framed: Framed::new(stream), next_id: 1 };
        let hs = ClientHandshake::new(&format!("migration:{}", &self.measurement().to_hex()[..16]));
        let hello = hs.hello().clone();
        let reply: HelloReply = serde_json::from_value(peer.call("migrate-hello", serde_json::to_value(&hello)?)?)
            .map_err(|e| Error::Protocol(format!("bad migrate-hello reply: {e}")))?;
        let platform = platform_for(&self.peer_platforms, &reply.server.report)
            .ok_or_else(|| Error::AttestationViolation("peer report signed by an untrusted platform key".into()))?;
        let peer_measurement = reply.server.report.measurement;
        let server_pub = reply.server.server_pubkey;
        let session = hs.finish(&reply.server, &self.pins, platform)?;
        peer.framed.secure(SecureChannel::new(session.channel_key, Role::Client));

        let attest = Attest {
            report: self.enclave.report(reply.challenge)?,
            binding_signature: self.enclave.sign(&binding_bytes(&reply.challenge, &hello.client_pubkey, &server_pub)),
        };
        peer.call("migrate-attest", serde_json::to_value(&attest)?)?;

        let mut report = MigrationReport { peer_measurement, manifest: Vec::new(), verified: Vec::new(), failed: Vec::new(), status: MigrationStatus::Complete };
        for id in ids {
            let ep = match self.engine.get(id) {
                Ok(ep) => ep,
                Err(e) => {
                    log::warn!("migration skips {id}: {e}");
                    report.failed.push(id.clone());
                    continue;
                }
            };
            let bytes = MemoryEngine::encode_body(&ep.body)?;
            let uid = memory_engine::unit_id(id);
            let entry = ManifestEntry {
                unit_id: uid.clone(),
                block_count: self.store().handle(&uid).map_or(0, |h| h.block_count),
                digest: crypto::sha256(&bytes),
            };
            let hook = self.fault.lock().clone();
            let mut accepted = false;
            for attempt in 0..MAX_ATTEMPTS {
                let mut data = bytes.clone();
                if let Some(h) = &hook {
                    h(id, attempt, &mut data);
                }
                let t = UnitTransfer { meta: ep.meta.clone(), data: hex::encode(&data), digest: entry.digest, block_count: entry.block_count };
                let r = peer.call("migrate-unit", serde_json::to_value(&t)?)?;
                if r["verified"].as_bool() == Some(true) {
                    accepted = true;
                    break;
                }
                log::warn!("migration of {id}: digest mismatch at peer (attempt {})", attempt + 1);
            }
            report.manifest.push(entry);
            if !accepted {
                report.failed.push(id.clone());
                continue;
            }
            self.engine.forget(id, &SystemRecorder(self, peer_name))?;
            self.unindex(id)?;
            peer.call("migrate-commit", json!({ "episode_id": id }))?;
            report.verified.push(id.clone());
        }
        peer.call("migrate-done", Value::Null)?;
        if !report.failed.is_empty() {
            report.status = MigrationStatus::Partial;
        }
        Ok(report)
    }

    /// Destination side, entered when a connection opens with
    /// `migrate-hello`. Staged units that never get a commit are destroyed.
    pub fn serve_migration<S: Read + Write>(&self, framed: &mut Framed<S>, first: WireMessage) -> Result<()> {
        let mut staged: HashMap<String, Episode> = HashMap::new();
        let r = self.serve_migration_inner(framed, first, &mut staged);
        for id in staged.keys() {
            if let Err(e) = self.store().destroy_unit(&memory_engine::unit_id(id)) {
                log::error!("could not drop staged unit {id}: {e}");
            }
        }
        r
    }

    fn serve_migration_inner<S: Read + Write>(&self, framed: &mut Framed<S>, first: WireMessage, staged: &mut HashMap<String, Episode>) -> Result<()> {
        let hello: ClientHello = serde_json::from_value(first.payload.clone()).map_err(|e| Error::Protocol(format!("bad migrate-hello: {e}")))?;
        let (ctx, server) = ingest::handshake(&self.enclave, &hello, self.cfg.ticket_ttl_secs)?;
        let challenge = crypto::random_bytes::<32>();
        let server_pub = server.server_pubkey;
        let reply = HelloReply { server, challenge };
        framed.send(&WireResponse::ok(first.id, serde_json::to_value(&reply)?).encode()?)?;
        framed.secure(SecureChannel::new(ctx.channel_key, Role::Server));

        let mut attested: Option<String> = None;
        loop {
            let Some(body) = framed.recv()? else {
                return Err(Error::Migration("source disconnected mid-migration".into()));
            };
            let msg = WireMessage::decode(&body)?;
            let result = match (msg.op.as_str(), &attested) {
                ("migrate-attest", None) => self.check_source(&msg.payload, &challenge, &hello.client_pubkey, &server_pub).map(|m| {
                    attested = Some(format!("peer:{}", &m.to_hex()[..16]));
                    Value::Null
                }),
                ("migrate-unit", Some(_)) => self.stage_unit(&msg.payload, staged),
                ("migrate-commit", Some(actor)) => self.commit_unit(&msg.payload, staged, actor),
                ("migrate-done", Some(_)) => {
                    framed.send(&WireResponse::ok(msg.id, Value::Null).encode()?)?;
                    return Ok(());
                }
                (op, None) => Err(Error::AttestationViolation(format!("{op} before the source attested"))),
                (op, Some(_)) => Err(Error::Protocol(format!("unexpected {op} during migration"))),
            };
            let fatal = matches!(result, Err(Error::AttestationViolation(_)) | Err(Error::Protocol(_)));
            let resp = match &result {
                Ok(v) => WireResponse::ok(msg.id, v.clone()),
                Err(e) => WireResponse::err(msg.id, e),
            };
            framed.send(&resp.encode()?)?;
            if fatal {
                return result.map(|_| ());
            }
        }
    }

    fn check_source(&self, payload: &Value, challenge: &[u8; 32], source_pub: &[u8; 32], server_pub: &[u8; 32]) -> Result<Measurement> {
        let a: Attest = serde_json::from_value(payload.clone()).map_err(|e| Error::Protocol(format!("bad migrate-attest: {e}")))?;
        let pk = platform_for(&self.peer_platforms, &a.report)
            .ok_or_else(|| Error::AttestationViolation("source report signed by an untrusted platform key".into()))?;
        let m = a.report.measurement;
        if !self.pins.contains(&m) {
            return Err(Error::AttestationViolation(format!("source measurement {m} is not pinned")));
        }
        if !tee_sim::verify_report(&a.report, &m, challenge, pk) {
            return Err(Error::AttestationViolation("source report does not verify for this challenge".into()));
        }
        if !tee_sim::verify_signature(pk, &binding_bytes(challenge, source_pub, server_pub), &a.binding_signature) {
            return Err(Error::AttestationViolation("source key binding does not verify".into()));
        }
        Ok(m)
    }

    fn stage_unit(&self, payload: &Value, staged: &mut HashMap<String, Episode>) -> Result<Value> {
        let t: UnitTransfer = serde_json::from_value(payload.clone()).map_err(|e| Error::InvalidInput(format!("bad migrate-unit: {e}")))?;
        let id = t.meta.episode_id.clone();
        let body = hex::decode(&t.data)
            .ok()
            .filter(|b| crypto::ct_eq(&crypto::sha256(b), &t.digest))
            .and_then(|b| serde_json::from_slice::<EpisodeBody>(&b).ok().map(|body| (b, body)));
        let Some((bytes, body)) = body.filter(|(_, body)| body.episode_id == id) else {
            return Ok(json!({ "unit_id": memory_engine::unit_id(&id), "verified": false }));
        };
        if self.engine.contains(&id) || staged.contains_key(&id) {
            return Err(Error::InvalidInput(format!("episode {id} already present")));
        }
        self.store().put_object(&memory_engine::unit_id(&id), &bytes)?;
        let meta = EpisodeMeta { tier: MemoryTier::Active, consolidated: false, ..t.meta };
        staged.insert(id.clone(), Episode { body, meta });
        Ok(json!({ "unit_id": memory_engine::unit_id(&id), "verified": true }))
    }

    fn commit_unit(&self, payload: &Value, staged: &mut HashMap<String, Episode>, actor: &str) -> Result<Value> {
        let id = payload["episode_id"].as_str().ok_or_else(|| Error::InvalidInput("migrate-commit needs episode_id".into()))?;
        let ep = staged.remove(id).ok_or_else(|| Error::NotFound(format!("no staged unit {id}")))?;
        self.engine.register(&ep)?;
        self.index_episode(&ep)?;
        self.audit.append(AuditEvent::new(actor, "migrate-in", &format!("episode:{id}"), "allow"))?;
        Ok(Value::Null)
    }
}
