mod common;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::Arc;
use std::thread;

use memtrust::governance::{self, Action, Policy, PolicyBundle};
use memtrust::keyvault::verify_deletion_proof;
use memtrust::memory_engine::{unit_id, MemoryEngine};
use memtrust::sealed_store::BLOCK_DATA;
use memtrust::tee_sim::Measurement;
use memtrust::ump_service::migration::MigrationStatus;
use memtrust::ump_service::service::{AUDIT_FILE, ANCHOR_FILE, TRACE_FILE};
use memtrust::ump_service::wire::{read_frame, write_frame, WireResponse};
use memtrust::ump_service::{Client, PinnedTrust};
use memtrust::Error;

#[test]
fn shutdown_ends_the_log_with_a_verifiable_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let trust = common::trust(&server);
    let data = server.core().config().data_dir.clone();
    let pk = server.core().platform_public();
    {
        let mut c = Client::connect(server.addr(), "agent", &trust).unwrap();
        c.remember("kickoff meeting notes", &[]).unwrap();
    }
    let anchor = server.shutdown().unwrap();
    let parsed = governance::read_log_file(&data.join(AUDIT_FILE)).unwrap();
    let last = parsed.entries.last().unwrap();
    assert_eq!(last.action, "anchor");
    assert_eq!(anchor.head_index, last.index);
    let report = governance::verify_log_files(&data.join(AUDIT_FILE), &data.join(ANCHOR_FILE), &pk).unwrap();
    assert!(report.is_clean(), "{:?}", report.issues);
}

#[test]
fn lying_length_closes_with_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let mut s = TcpStream::connect(server.addr()).unwrap();
    let mut frame = 1000u32.to_be_bytes().to_vec();
    frame.extend_from_slice(br#"{"id":1,"op":"handshake"}"#);
    s.write_all(&frame).unwrap();
    s.shutdown(Shutdown::Write).unwrap();
    let body = read_frame(&mut s).unwrap().expect("an error frame before close");
    let resp = WireResponse::decode(&body).unwrap();
    assert!(!resp.ok);
    assert_eq!(resp.error.unwrap().code, "protocol");
    let mut rest = Vec::new();
    s.read_to_end(&mut rest).unwrap();
    assert!(rest.is_empty());
    server.shutdown().unwrap();
}

#[test]
fn garbage_inside_the_channel_is_rejected_and_closed() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let trust = common::trust(&server);
    let hs = memtrust::ingest::ClientHandshake::new("raw");
    let mut s = TcpStream::connect(server.addr()).unwrap();
    let hello = memtrust::ump_service::WireMessage::new("handshake", 0, serde_json::to_value(hs.hello()).unwrap());
    write_frame(&mut s, &hello.encode().unwrap()).unwrap();
    let sh = WireResponse::decode(&read_frame(&mut s).unwrap().unwrap()).unwrap().into_result().unwrap();
    hs.finish(&serde_json::from_value(sh).unwrap(), &trust.measurements, &trust.platform).unwrap();
    // A plaintext request after the handshake fails channel authentication.
    write_frame(&mut s, br#"{"id":5,"op":"recall","payload":{"query_text":"x"}}"#).unwrap();
    let mut rest = Vec::new();
    let _ = s.read_to_end(&mut rest);
    let t0 = std::time::Instant::now();
    while server.core().session_count() > 0 && t0.elapsed().as_secs() < 5 {
        thread::sleep(std::time::Duration::from_millis(10));
    }
    assert_eq!(server.core().session_count(), 0);
    server.shutdown().unwrap();
}

#[test]
fn unpinned_server_gets_nothing_but_the_hello() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let wrong = PinnedTrust { measurements: vec![Measurement([7; 32])], platform: server.core().platform_public() };
    let err = Client::connect(server.addr(), "agent", &wrong).err().unwrap();
    assert!(matches!(err, Error::AttestationViolation(_)), "{err}");
    // Give the connection thread a moment to log the close.
    thread::sleep(std::time::Duration::from_millis(50));
    let ops: Vec<String> = server.frame_log().lock().iter().map(|(_, op)| op.clone()).collect();
    assert_eq!(ops, ["handshake"]);
    assert!(server.core().engine().is_empty());
    server.shutdown().unwrap();
}

#[test]
fn two_agents_share_project_memory() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let trust = common::trust(&server);
    let mut planner = Client::connect(server.addr(), "planner", &trust).unwrap();
    let id = planner.remember("Project: Snake Game, Language: Python", &["project"]).unwrap();
    planner.remember("team lunch is on friday", &[]).unwrap();
    drop(planner);
    let mut coder = Client::connect(server.addr(), "coder", &trust).unwrap();
    let frame = coder.recall("which language does the snake game project use", 3, &[]).unwrap();
    assert_eq!(frame.entries[0].doc_id, id);
    assert!(frame.entries[0].text.as_deref().unwrap().contains("Language: Python"));
    drop(coder);
    server.shutdown().unwrap();
}

#[test]
fn concurrent_clients_interleave_in_isolated_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let trust = common::trust(&server);
    let addr = server.addr();
    let handles: Vec<_> = ["north", "south"]
        .into_iter()
        .map(|who| {
            let trust = trust.clone();
            thread::spawn(move || {
                let mut c = Client::connect(addr, who, &trust).unwrap();
                let mut sessions = vec![c.session_id().to_string()];
                for i in 0..15 {
                    let text = format!("{who} station log entry {i} pressure reading {}", i * 7 + who.len());
                    let id = c.remember(&text, &[]).unwrap();
                    let f = c.recall(&text, 1, &[]).unwrap();
                    assert_eq!(f.entries[0].doc_id, id, "{who} {i}");
                    sessions.push(c.session_id().to_string());
                }
                sessions.dedup();
                assert_eq!(sessions.len(), 1);
                sessions.pop().unwrap()
            })
        })
        .collect();
    let ids: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_ne!(ids[0], ids[1]);
    assert_eq!(server.core().engine().len(), 30);
    server.shutdown().unwrap();
}

#[test]
fn one_mebibyte_episode_spans_the_expected_block_count() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let trust = common::trust(&server);
    let mut c = Client::connect(server.addr(), "bulk", &trust).unwrap();
    let word = "telemetry ";
    let text: String = word.repeat((1 << 20) / word.len() + 1)[..1 << 20].to_string();
    let id = c.remember(&text, &[]).unwrap();
    let core = server.core();
    let h = core.store().handle(&unit_id(&id)).unwrap();
    let stored = MemoryEngine::encode_body(&core.engine().get(&id).unwrap().body).unwrap();
    assert_eq!(h.len as usize, stored.len());
    assert!(stored.len() > 1 << 20);
    assert_eq!(h.block_count as usize, stored.len().div_ceil(BLOCK_DATA));
    assert_eq!(core.store().block_paths(&unit_id(&id)).len(), h.block_count as usize);
    drop(c);
    server.shutdown().unwrap();
}

fn trace_lines_for(path: &std::path::Path, query_id: &str) -> usize {
    let needle = format!("query={query_id}");
    std::fs::read_to_string(path).unwrap_or_default().lines().filter(|l| l.ends_with(&needle)).count()
}

#[test]
fn each_recall_fetches_exactly_k_buckets() {
    for k in [1usize, 2, 4] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = common::config(dir.path());
        cfg.k_anonymity = k;
        let server = common::start(cfg);
        let trust = common::trust(&server);
        let mut c = Client::connect(server.addr(), "tracer", &trust).unwrap();
        // 64 vectors per bucket: 200 episodes fill four buckets, so k is
        // never capped by the bucket count.
        for i in 0..200 {
            c.remember(&format!("sensor {i} calibrated at offset {}", i * 3), &[]).unwrap();
        }
        let trace = server.core().trace_path();
        assert!(trace.ends_with(TRACE_FILE));
        for q in ["sensor 3 calibrated", "offset 27", "nothing in common"] {
            let f = c.recall(q, 5, &[]).unwrap();
            assert_eq!(trace_lines_for(&trace, &f.query_id), k, "k={k} query {q}");
        }
        drop(c);
        server.shutdown().unwrap();
    }
}

#[test]
fn forget_over_the_wire_verifies_and_disappears() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(common::config(dir.path()));
    let trust = common::trust(&server);
    let mut c = Client::connect(server.addr(), "agent", &trust).unwrap();
    let id = c.remember("the vault combination is kept in the blue folder", &[]).unwrap();
    let (resp, ok) = c.forget(&id, &trust.platform).unwrap();
    assert!(ok);
    assert!(verify_deletion_proof(&resp.proof, &trust.platform, &resp.audit_chain));
    let frame = c.recall("vault combination blue folder", 5, &["blue folder"]).unwrap();
    assert!(frame.entries.iter().all(|e| e.doc_id != id));
    assert!(matches!(c.forget("no-such-episode", &trust.platform), Err(Error::NotFound(_))));
    drop(c);
    server.shutdown().unwrap();
}

/// Every state-mutating response maps to exactly one audit entry by
/// (actor, action, resource); system entries are bookkeeping and excluded.
#[test]
fn mutating_responses_and_audit_entries_are_in_bijection() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config(dir.path());
    let bundle = PolicyBundle::new(vec![
        Policy::allow("*", Action::Remember, "*", 0),
        Policy::deny("*", Action::Remember, "secret", 5),
        Policy::allow("*", Action::Recall, "*", 0),
        Policy::allow("*", Action::Forget, "*", 0),
        Policy::deny("intern", Action::Forget, "*", 5),
    ]);
    cfg.policy_file = Some(common::write_policy(dir.path(), &bundle));
    let server = common::start(cfg);
    let trust = common::trust(&server);
    let mut a = Client::connect(server.addr(), "lead", &trust).unwrap();
    let mut b = Client::connect(server.addr(), "intern", &trust).unwrap();

    let mut expected: Vec<(String, String, String)> = Vec::new();
    let exp = |actor: &str, action: &str, resource: String| (actor.to_string(), action.to_string(), resource);
    let mut ids = Vec::new();
    for (i, c) in [&mut a, &mut b].into_iter().enumerate() {
        for j in 0..3 {
            let who = ["lead", "intern"][i];
            let id = c.remember(&format!("{who} note {j} about the release checklist"), &["notes"]).unwrap();
            expected.push(exp(who, "remember", format!("notes/{id}")));
            ids.push((who, id));
        }
    }
    assert!(matches!(b.remember("the payroll spreadsheet", &["secret"]), Err(Error::Denied(_))));
    expected.push(exp("intern", "remember", "label:secret".into()));
    for (who, c) in [("lead", &mut a), ("intern", &mut b)] {
        let f = c.recall("release checklist", 4, &[]).unwrap();
        expected.push(exp(who, "recall", format!("query:{}", f.query_id)));
    }
    let victim = ids[0].1.clone();
    assert!(matches!(b.forget(&victim, &trust.platform), Err(Error::Denied(_))));
    expected.push(exp("intern", "forget", format!("episode:{victim}")));
    let (resp, _) = a.forget(&victim, &trust.platform).unwrap();
    expected.push(exp("lead", "forget", format!("unit:{}", resp.proof.unit_id)));
    // Non-mutating failures leave no trace.
    assert!(matches!(a.forget("missing", &trust.platform), Err(Error::NotFound(_))));
    drop((a, b));

    let entries = server.core().audit().entries();
    let mut seen: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.actor != "system") {
        *seen.entry((e.actor.clone(), e.action.clone(), e.resource.clone())).or_default() += 1;
    }
    let mut want: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for k in expected {
        *want.entry(k).or_default() += 1;
    }
    assert_eq!(seen, want);
    server.shutdown().unwrap();
}

fn two_nodes(root: &std::path::Path, dest_policy: Option<PolicyBundle>) -> (memtrust::ump_service::Server, memtrust::ump_service::Server) {
    let (ka, pa) = common::platform_key(root, "a");
    let (kb, pb) = common::platform_key(root, "b");
    let mut ca = common::config(&root.join("a"));
    ca.platform_key_file = Some(ka);
    ca.peer_platform_keys = vec![pb];
    let mut cb = common::config(&root.join("b"));
    cb.platform_key_file = Some(kb);
    cb.peer_platform_keys = vec![pa];
    if let Some(p) = dest_policy {
        std::fs::create_dir_all(root.join("pb")).unwrap();
        cb.policy_file = Some(common::write_policy(&root.join("pb"), &p));
    }
    (common::start(ca), common::start(cb))
}

fn seed_units(server: &memtrust::ump_service::Server, n: usize) -> Vec<(String, Vec<u8>)> {
    let trust = common::trust(server);
    let mut c = Client::connect(server.addr(), "owner", &trust).unwrap();
    (0..n)
        .map(|i| {
            let id = c.remember(&format!("migration payload {i}: quarterly figures draft"), &[]).unwrap();
            let bytes = server.core().store().get_unit(&unit_id(&id)).unwrap();
            (id, bytes)
        })
        .collect()
}

#[test]
fn migration_moves_units_with_matching_plaintext() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = two_nodes(dir.path(), None);
    let units = seed_units(&a, 3);
    let trust = common::trust(&a);
    let mut c = Client::connect(a.addr(), "owner", &trust).unwrap();
    let report = c.migrate(&b.addr().to_string(), None).unwrap();
    assert_eq!(report.status, MigrationStatus::Complete);
    assert_eq!(report.verified.len(), 3);
    assert_eq!(report.peer_measurement, b.core().measurement());
    for (id, bytes) in &units {
        assert_eq!(&b.core().store().get_unit(&unit_id(id)).unwrap(), bytes);
        assert!(b.core().engine().contains(id));
        assert!(!a.core().engine().contains(id));
        assert!(matches!(a.core().store().get_unit(&unit_id(id)), Err(Error::Shredded(_)) | Err(Error::NotFound(_))));
    }
    // The destination serves the moved units to its own clients.
    let tb = common::trust(&b);
    let mut cb = Client::connect(b.addr(), "owner", &tb).unwrap();
    let f = cb.recall("migration payload 1 quarterly figures", 1, &[]).unwrap();
    assert_eq!(f.entries[0].doc_id, units[1].0);
    drop((c, cb));
    a.shutdown().unwrap();
    b.shutdown().unwrap();
}

#[test]
fn migration_to_an_unpinned_measurement_moves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let odd = PolicyBundle::new(vec![Policy::allow("*", Action::Remember, "*", 1), Policy::allow("*", Action::Recall, "*", 1)]);
    let (a, b) = two_nodes(dir.path(), Some(odd));
    assert_ne!(a.core().measurement(), b.core().measurement());
    let units = seed_units(&a, 3);
    let trust = common::trust(&a);
    let mut c = Client::connect(a.addr(), "owner", &trust).unwrap();
    let err = c.migrate(&b.addr().to_string(), None).err().unwrap();
    assert!(matches!(err, Error::AttestationViolation(_)), "{err}");
    for (id, bytes) in &units {
        assert_eq!(&a.core().store().get_unit(&unit_id(id)).unwrap(), bytes);
    }
    assert!(b.core().engine().is_empty());
    assert!(b.core().store().data_units().is_empty());
    let ops: Vec<String> = b.frame_log().lock().iter().map(|(_, op)| op.clone()).collect();
    assert_eq!(ops, ["migrate-hello"]);
    drop(c);
    a.shutdown().unwrap();
    b.shutdown().unwrap();
}

#[test]
fn corrupted_unit_is_isolated_and_transient_corruption_retried() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = two_nodes(dir.path(), None);
    let units = seed_units(&a, 3);
    let always = units[0].0.clone();
    let once = units[2].0.clone();
    a.core().set_fault_hook(Some(Arc::new(move |id: &str, attempt: u32, data: &mut Vec<u8>| {
        if id == always || (id == once && attempt == 0) {
            data[10] ^= 0x40;
        }
    })));
    let trust = common::trust(&a);
    let mut c = Client::connect(a.addr(), "owner", &trust).unwrap();
    let report = c.migrate(&b.addr().to_string(), None).unwrap();
    assert_eq!(report.status, MigrationStatus::Partial);
    assert_eq!(report.failed, vec![units[0].0.clone()]);
    let mut verified = report.verified.clone();
    verified.sort();
    let mut want = vec![units[1].0.clone(), units[2].0.clone()];
    want.sort();
    assert_eq!(verified, want);
    // The failed unit stays live at the source only.
    assert_eq!(a.core().store().get_unit(&unit_id(&units[0].0)).unwrap(), units[0].1);
    assert!(!b.core().engine().contains(&units[0].0));
    assert!(b.core().store().handle(&unit_id(&units[0].0)).is_none());
    for (id, bytes) in &units[1..] {
        assert_eq!(&b.core().store().get_unit(&unit_id(id)).unwrap(), bytes);
    }
    drop(c);
    a.shutdown().unwrap();
    b.shutdown().unwrap();
}
