//! Masking proxy in front of an untrusted completion API.
//!
//! Outbound prompts are sanitized against the session's mapping table; the
//! client only ever sees placeholders. Responses are treated as untrusted
//! text and have known placeholders substituted back.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::sanitize::{self, MappingTable, RuleSet, SanitizedEvent};
use crate::tee_sim::{SealedBlob, SharedEnclave};

pub trait CompletionClient: Send + Sync {
    fn complete(&self, masked_prompt: &str) -> Result<String>;
}

/// Returns the prompt unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoClient;

impl CompletionClient for EchoClient {
    fn complete(&self, masked_prompt: &str) -> Result<String> {
        Ok(masked_prompt.to_string())
    }
}

type Responder = Box<dyn Fn(&str) -> Result<String> + Send + Sync>;

/// Keeps every prompt it receives. Echoes unless given a responder.
pub struct RecordingClient {
    seen: Mutex<Vec<String>>,
    respond: Option<Responder>,
}

impl Default for RecordingClient {
    fn default() -> Self {
        Self { seen: Mutex::new(Vec::new()), respond: None }
    }
}

impl RecordingClient {
    pub fn with_responder(f: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self { seen: Mutex::new(Vec::new()), respond: Some(Box::new(f)) }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.seen.lock().clone()
    }
}

impl CompletionClient for RecordingClient {
    fn complete(&self, masked_prompt: &str) -> Result<String> {
        self.seen.lock().push(masked_prompt.to_string());
        match &self.respond {
            Some(f) => f(masked_prompt),
            None => Ok(masked_prompt.to_string()),
        }
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

/// POSTs `{"prompt": ...}` and reads `{"text": ...}`.
pub struct HttpClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, timeout_ms: u64) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(timeout_ms)).build();
        Self { endpoint: endpoint.into(), agent }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, masked_prompt: &str) -> Result<String> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .send_json(HttpRequest { prompt: masked_prompt })
            .map_err(|e| Error::Upstream(e.to_string()))?;
        let body: HttpResponse = resp.into_json().map_err(|e| Error::Upstream(format!("bad completion body: {e}")))?;
        Ok(body.text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedPrompt {
    pub text: String,
    /// `(placeholder, original)` pairs minted by this call.
    pub table_delta: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unmasked {
    pub text: String,
    /// Placeholder-shaped tokens that this session never issued.
    pub warnings: Vec<String>,
}

struct SessionTable {
    table: MappingTable,
    sealed: SealedBlob,
}

pub struct PrivacyProxy {
    enclave: SharedEnclave,
    rules: Arc<RuleSet>,
    dir: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionTable>>>>,
}

impl PrivacyProxy {
    /// With `dir`, each session's sealed table is also kept on disk there.
    pub fn new(enclave: SharedEnclave, rules: Arc<RuleSet>, dir: Option<PathBuf>) -> Self {
        Self { enclave, rules, dir, sessions: Mutex::new(HashMap::new()) }
    }

    pub fn rules(&self) -> &Arc<RuleSet> {
        &self.rules
    }

    fn table_path(&self, session_id: &str) -> Option<PathBuf> {
        let name = hex::encode(crate::crypto::sha256(session_id.as_bytes()));
        self.dir.as_ref().map(|d| d.join(format!("{name}.sealed")))
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<SessionTable>>> {
        let mut s = self.sessions.lock();
        if let Some(t) = s.get(session_id) {
            return Ok(t.clone());
        }
        let table = MappingTable::new(session_id);
        let sealed = table.seal(&self.enclave)?;
        let t = Arc::new(Mutex::new(SessionTable { table, sealed }));
        s.insert(session_id.to_string(), t.clone());
        Ok(t)
    }

    fn persist(&self, session_id: &str, st: &mut SessionTable) -> Result<()> {
        st.sealed = st.table.seal(&self.enclave)?;
        if let Some(p) = self.table_path(session_id) {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(Error::DurableWrite)?;
            }
            crate::durable::atomic_write(&p, &st.sealed.to_bytes())?;
        }
        Ok(())
    }

    /// Sanitizes `text` in the session's namespace.
    pub fn sanitize(&self, session_id: &str, text: &str) -> Result<SanitizedEvent> {
        let t = self.session(session_id)?;
        let mut st = t.lock();
        let (ev, created) = sanitize::sanitize_with(text, &self.rules, &mut st.table);
        if created > 0 {
            self.persist(session_id, &mut st)?;
        }
        Ok(ev)
    }

    pub fn mask(&self, session_id: &str, prompt: &str) -> Result<MaskedPrompt> {
        let t = self.session(session_id)?;
        let mut st = t.lock();
        let before: Vec<String> = st.table.entries().map(|(p, _)| p.to_string()).collect();
        let (ev, created) = sanitize::sanitize_with(prompt, &self.rules, &mut st.table);
        let mut table_delta = Vec::new();
        if created > 0 {
            table_delta = st
                .table
                .entries()
                .filter(|(p, _)| !before.iter().any(|b| b == p))
                .map(|(p, o)| (p.to_string(), o.to_string()))
                .collect();
            self.persist(session_id, &mut st)?;
        }
        Ok(MaskedPrompt { text: ev.text, table_delta })
    }

    pub fn unmask(&self, session_id: &str, response: &str) -> Result<Unmasked> {
        let t = self.session(session_id)?;
        let st = t.lock();
        let (text, warnings) = sanitize::restore(response, &st.table);
        for w in &warnings {
            log::warn!("session {session_id}: response carried unknown placeholder {w}");
        }
        Ok(Unmasked { text, warnings })
    }

    /// Masks, calls the client, unmasks. Masking is append-only, so a client
    /// failure leaves nothing to roll back.
    pub fn proxy_complete(&self, session_id: &str, prompt: &str, client: &dyn CompletionClient) -> Result<Unmasked> {
        let masked = self.mask(session_id, prompt)?;
        let reply = client.complete(&masked.text)?;
        self.unmask(session_id, &reply)
    }

    /// The persisted form of the session's table.
    pub fn sealed_table(&self, session_id: &str) -> Result<SealedBlob> {
        Ok(self.session(session_id)?.lock().sealed.clone())
    }

    pub fn table_len(&self, session_id: &str) -> usize {
        self.sessions.lock().get(session_id).map_or(0, |t| t.lock().table.len())
    }

    /// Drops the table from memory and disk.
    pub fn end_session(&self, session_id: &str) -> Result<()> {
        if let Some(t) = self.sessions.lock().remove(session_id) {
            t.lock().table.clear();
        }
        if let Some(p) = self.table_path(session_id) {
            match fs::remove_file(&p) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MockClock;
    use crate::tee_sim::{Enclave, PlatformKey};
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn proxy(dir: Option<PathBuf>) -> PrivacyProxy {
        let e = Arc::new(Enclave::launch(PlatformKey::from_secret([8; 32]), b"c", b"p", Arc::new(MockClock::new(0))));
        let names = vec!["John Smith".to_string(), "Alice Jones".to_string()];
        PrivacyProxy::new(e, Arc::new(RuleSet::standard(&names)), dir)
    }

    #[test]
    fn worked_mask_examples() {
        let p = proxy(None);
        assert_eq!(p.mask("s", "plain words").unwrap().text, "plain words");
        let m = p.mask("s", "Email a@b.com about John Smith").unwrap();
        assert_eq!(m.text, "Email [EMAIL_1] about [PERSON_1]");
        assert_eq!(m.table_delta.len(), 2);
        let m2 = p.mask("s", "John Smith again").unwrap();
        assert_eq!(m2.text, "[PERSON_1] again");
        assert!(m2.table_delta.is_empty());
        assert_eq!(p.mask("other", "John Smith").unwrap().text, "[PERSON_1]");
    }

    #[test]
    fn unmask_unknown_and_adjacent() {
        let p = proxy(None);
        p.mask("s", "a@b.com John Smith").unwrap();
        let u = p.unmask("s", "[EMAIL_1][PERSON_1] and [PERSON_9]").unwrap();
        assert_eq!(u.text, "a@b.comJohn Smith and [PERSON_9]");
        assert_eq!(u.warnings, vec!["[PERSON_9]".to_string()]);
    }

    #[test]
    fn adjacent_substitution_matches_oracle() {
        // Exhaustive over all length-3 strings on a small placeholder alphabet:
        // the result must equal naive token-by-token substitution.
        let p = proxy(None);
        p.mask("s", "x@y.io John Smith").unwrap();
        let alphabet = ["[EMAIL_1]", "[PERSON_1]", "[EMAIL_2]", "-", "["];
        fn expect(t: &str) -> &str {
            match t {
                "[EMAIL_1]" => "x@y.io",
                "[PERSON_1]" => "John Smith",
                other => other,
            }
        }
        for a in alphabet {
            for b in alphabet {
                for c in alphabet {
                    let input = format!("{a}{b}{c}");
                    let want: String = [a, b, c].iter().map(|t| expect(t)).collect();
                    assert_eq!(p.unmask("s", &input).unwrap().text, want, "{input}");
                }
            }
        }
    }

    #[test]
    fn recording_client_sees_only_placeholders() {
        let p = proxy(None);
        let rec = RecordingClient::default();
        let out = p.proxy_complete("s", "ping John Smith at a@b.com", &rec).unwrap();
        assert_eq!(out.text, "ping John Smith at a@b.com");
        let seen = rec.prompts();
        assert_eq!(seen, vec!["ping [PERSON_1] at [EMAIL_1]".to_string()]);
    }

    #[test]
    fn reordered_tokens_restore_in_order() {
        let p = proxy(None);
        let rev = RecordingClient::with_responder(|m| Ok(m.split(' ').rev().collect::<Vec<_>>().join(" ")));
        let out = p.proxy_complete("s", "John Smith a@b.com", &rev).unwrap();
        assert_eq!(out.text, "a@b.com John Smith");
    }

    #[test]
    fn client_failure_is_upstream() {
        let p = proxy(None);
        let bad = RecordingClient::with_responder(|_| Err(Error::Upstream("timeout".into())));
        assert!(matches!(p.proxy_complete("s", "John Smith", &bad), Err(Error::Upstream(_))));
        assert_eq!(p.table_len("s"), 1);
    }

    #[test]
    fn table_is_sealed_on_disk_and_cleared() {
        let dir = tempfile::tempdir().unwrap();
        let p = proxy(Some(dir.path().to_path_buf()));
        p.mask("s", "secret-person@example.org").unwrap();
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(files.len(), 1);
        let bytes = fs::read(&files[0]).unwrap();
        assert!(!bytes.windows(13).any(|w| w == b"secret-person"));
        let blob = p.sealed_table("s").unwrap();
        assert_eq!(MappingTable::unseal(&p.enclave, &blob).unwrap().len(), 1);
        p.end_session("s").unwrap();
        assert_eq!(p.table_len("s"), 0);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn http_client_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                r.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            r.read_exact(&mut body).unwrap();
            let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let reply = serde_json::json!({ "text": format!("got {}", v["prompt"].as_str().unwrap()) }).to_string();
            let mut w = stream;
            write!(w, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{}", reply.len(), reply).unwrap();
        });
        let p = proxy(None);
        let c = HttpClient::new(format!("http://{addr}/complete"), 2000);
        let out = p.proxy_complete("s", "hi John Smith", &c).unwrap();
        assert_eq!(out.text, "got hi John Smith");
        server.join().unwrap();
        let dead = HttpClient::new("http://127.0.0.1:1/none", 200);
        assert!(matches!(dead.complete("x"), Err(Error::Upstream(_))));
    }

    proptest! {
        #[test]
        fn echo_round_trip_is_identity(prompt in "[ -~]{0,80}") {
            let p = proxy(None);
            let out = p.proxy_complete("s", &prompt, &EchoClient).unwrap();
            prop_assert_eq!(out.text, prompt);
            prop_assert!(out.warnings.is_empty());
        }
    }
}
