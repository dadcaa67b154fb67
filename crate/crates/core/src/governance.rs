//! Governance: measured policy evaluation, the hash-chained audit log with
//! signed anchors, and channel-bound session tickets.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ed25519_dalek::VerifyingKey;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::clock::{iso8601, parse_iso8601, SharedClock};
use crate::crypto::{self, Hash32, Key32};
use crate::error::{Error, Result};
use crate::hexser;
use crate::tee_sim::{self, Enclave, Measurement};

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Remember,
    Recall,
    Forget,
    Migrate,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Remember => "remember",
            Action::Recall => "recall",
            Action::Forget => "forget",
            Action::Migrate => "migrate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Allow,
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Agent id, or `*` for any agent.
    pub subject: String,
    /// Label pattern; `*` matches any run of characters.
    pub resource: String,
    pub action: Action,
    pub effect: Effect,
    #[serde(default)]
    pub priority: i64,
}

impl Policy {
    pub fn allow(subject: &str, action: Action, resource: &str, priority: i64) -> Self {
        Self { id: None, subject: subject.into(), resource: resource.into(), action, effect: Effect::Allow, priority }
    }

    pub fn deny(subject: &str, action: Action, resource: &str, priority: i64) -> Self {
        Self { effect: Effect::Deny, ..Self::allow(subject, action, resource, priority) }
    }

    fn matches_subject(&self, actor: &str) -> bool {
        self.subject == "*" || self.subject == actor
    }
}

/// The policy file: a canonical-JSON list of rules. Its SHA-256 is what the
/// enclave measurement covers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PolicyBundle {
    pub rules: Vec<Policy>,
}

impl PolicyBundle {
    pub fn new(rules: Vec<Policy>) -> Self {
        Self { rules }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(Self { rules: serde_json::from_slice(bytes)? })
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_vec(&self.rules).expect("policies always serialize")
    }

    pub fn digest(&self) -> Hash32 {
        crypto::sha256(&self.canonical_bytes())
    }

    fn rule_id(&self, i: usize) -> String {
        self.rules[i].id.clone().unwrap_or_else(|| format!("rule-{i}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request<'a> {
    pub actor: &'a str,
    pub action: Action,
    pub resource: &'a str,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    pub effect: Effect,
    pub rule_id: Option<String>,
}

impl Decision {
    pub fn allowed(&self) -> bool {
        self.effect == Effect::Allow
    }

    pub fn label(&self) -> &'static str {
        if self.allowed() {
            "allow"
        } else {
            "deny"
        }
    }
}

/// Evaluator over a bundle whose digest is folded into the running
/// measurement.
#[derive(Clone, Debug)]
pub struct PolicyEngine {
    bundle: PolicyBundle,
}

impl PolicyEngine {
    /// Refuses to run a bundle that is not the one the enclave was measured
    /// with.
    pub fn bind(bundle: PolicyBundle, code_bundle: &[u8], measurement: &Measurement) -> Result<Self> {
        let expected = tee_sim::measure(code_bundle, &bundle.digest());
        if &expected != measurement {
            return Err(Error::AttestationViolation(
                "policy bundle hash does not match the enclave measurement".into(),
            ));
        }
        Ok(Self { bundle })
    }

    pub fn bundle(&self) -> &PolicyBundle {
        &self.bundle
    }

    pub fn evaluate(&self, req: &Request<'_>) -> Decision {
        evaluate(&self.bundle, req)
    }

    /// True when some allow rule could grant `action` to `actor` on at least
    /// one resource.
    pub fn may_perform(&self, actor: &str, action: Action) -> bool {
        self.bundle
            .rules
            .iter()
            .any(|r| r.effect == Effect::Allow && r.action == action && r.matches_subject(actor))
    }
}

/// Highest priority matching rule decides; deny wins a priority tie; no
/// match means deny.
pub fn evaluate(bundle: &PolicyBundle, req: &Request<'_>) -> Decision {
    let mut best: Option<usize> = None;
    for (i, rule) in bundle.rules.iter().enumerate() {
        if rule.action != req.action || !rule.matches_subject(req.actor) || !glob_match(&rule.resource, req.resource) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &bundle.rules[b];
                if rule.priority > cur.priority || (rule.priority == cur.priority && rule.effect == Effect::Deny && cur.effect == Effect::Allow) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    match best {
        Some(i) => Decision { effect: bundle.rules[i].effect, rule_id: Some(bundle.rule_id(i)) },
        None => Decision { effect: Effect::Deny, rule_id: None },
    }
}

/// `*` matches any (possibly empty) run of characters; everything else is
/// literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

// ---------------------------------------------------------------------------
// Audit log
// ---------------------------------------------------------------------------

pub const GENESIS_PREV: Hash32 = [0u8; 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub actor: String,
    pub action: String,
    pub resource: String,
    pub decision: String,
}

impl AuditEvent {
    pub fn new(actor: &str, action: &str, resource: &str, decision: &str) -> Self {
        Self { actor: actor.into(), action: action.into(), resource: resource.into(), decision: decision.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub index: u64,
    #[serde(with = "hexser")]
    pub prev_hash: Hash32,
    pub timestamp: u64,
    pub actor: String,
    pub action: String,
    pub resource: String,
    pub decision: String,
    #[serde(with = "hexser")]
    pub entry_hash: Hash32,
}

#[derive(Serialize)]
struct EntryBody<'a> {
    index: u64,
    timestamp: u64,
    actor: &'a str,
    action: &'a str,
    resource: &'a str,
    decision: &'a str,
}

impl AuditEntry {
    /// `H(prev_hash ‖ canonical(index, timestamp, actor, action, resource, decision))`.
    pub fn compute_hash(&self) -> Hash32 {
        let body = EntryBody {
            index: self.index,
            timestamp: self.timestamp,
            actor: &self.actor,
            action: &self.action,
            resource: &self.resource,
            decision: &self.decision,
        };
        let bytes = canonical::to_canonical_vec(&body).expect("entry body serializes");
        crypto::sha256_parts(&[&self.prev_hash, &bytes])
    }

    fn to_record(&self) -> Vec<u8> {
        let json = canonical::to_canonical_vec(self).expect("entry serializes");
        let mut out = Vec::with_capacity(4 + json.len());
        out.extend_from_slice(&(json.len() as u32).to_be_bytes());
        out.extend_from_slice(&json);
        out
    }
}

/// Single-writer append-only log; each entry is fsynced before `append`
/// returns.
pub struct AuditLog {
    path: PathBuf,
    clock: SharedClock,
    inner: Mutex<LogInner>,
}

struct LogInner {
    file: File,
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn open(path: impl Into<PathBuf>, clock: SharedClock) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let entries = if path.exists() {
            let parsed = read_log_file(&path)?;
            if let Some(idx) = parsed.corrupt_at {
                return Err(Error::Tamper(format!("audit log unreadable at entry {idx}")));
            }
            parsed.entries
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, clock, inner: Mutex::new(LogInner { file, entries }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: AuditEvent) -> Result<AuditEntry> {
        let mut inner = self.inner.lock();
        let (index, prev_hash) = match inner.entries.last() {
            Some(last) => (last.index + 1, last.entry_hash),
            None => (0, GENESIS_PREV),
        };
        let mut entry = AuditEntry {
            index,
            prev_hash,
            timestamp: self.clock.now(),
            actor: event.actor,
            action: event.action,
            resource: event.resource,
            decision: event.decision,
            entry_hash: [0; 32],
        };
        entry.entry_hash = entry.compute_hash();
        let record = entry.to_record();
        inner.file.write_all(&record).map_err(Error::DurableWrite)?;
        inner.file.sync_data().map_err(Error::DurableWrite)?;
        inner.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.inner.lock().entries.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head(&self) -> Option<AuditEntry> {
        self.inner.lock().entries.last().cloned()
    }

    pub fn contains_hash(&self, hash: &Hash32) -> bool {
        self.inner.lock().entries.iter().any(|e| &e.entry_hash == hash)
    }
}

pub struct ParsedLog {
    pub entries: Vec<AuditEntry>,
    /// Record position at which the byte stream stopped being a valid,
    /// canonical sequence of entries.
    pub corrupt_at: Option<u64>,
}

pub fn parse_log_bytes(bytes: &[u8]) -> ParsedLog {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let at = entries.len() as u64;
        let bad = ParsedLog { entries: Vec::new(), corrupt_at: Some(at) };
        if pos + 4 > bytes.len() {
            return ParsedLog { entries, ..bad };
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let start = pos + 4;
        let Some(body) = bytes.get(start..start + len) else {
            return ParsedLog { entries, ..bad };
        };
        let Ok(entry) = serde_json::from_slice::<AuditEntry>(body) else {
            return ParsedLog { entries, ..bad };
        };
        // Reject anything that parses but is not byte-identical to the
        // canonical encoding.
        if canonical::to_canonical_vec(&entry).ok().as_deref() != Some(body) {
            return ParsedLog { entries, ..bad };
        }
        entries.push(entry);
        pos = start + len;
    }
    ParsedLog { entries, corrupt_at: None }
}

pub fn read_log_file(path: &Path) -> Result<ParsedLog> {
    Ok(parse_log_bytes(&fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Anchors
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorRecord {
    pub head_index: u64,
    pub head_hash: Hash32,
    pub anchored_at: u64,
    pub signature: [u8; 64],
}

impl AnchorRecord {
    pub fn signed_bytes(head_index: u64, head_hash: &Hash32, anchored_at: u64) -> Vec<u8> {
        let mut msg = b"memtrust-anchor-v1".to_vec();
        msg.extend_from_slice(&head_index.to_be_bytes());
        msg.extend_from_slice(head_hash);
        msg.extend_from_slice(&anchored_at.to_be_bytes());
        msg
    }

    pub fn verify(&self, pk: &VerifyingKey) -> bool {
        tee_sim::verify_signature(pk, &Self::signed_bytes(self.head_index, &self.head_hash, self.anchored_at), &self.signature)
    }

    /// `anchor <index> <hex head_hash> <iso8601> <hex signature>`
    pub fn to_line(&self) -> String {
        format!(
            "anchor {} {} {} {}",
            self.head_index,
            hex::encode(self.head_hash),
            iso8601(self.anchored_at),
            hex::encode(self.signature)
        )
    }

    pub fn from_line(line: &str) -> Option<Self> {
        let mut it = line.split_whitespace();
        if it.next()? != "anchor" {
            return None;
        }
        let head_index = it.next()?.parse().ok()?;
        let head_hash = hexser::decode_array(it.next()?)?;
        let anchored_at = parse_iso8601(it.next()?)?;
        let signature = hexser::decode_array(it.next()?)?;
        if it.next().is_some() {
            return None;
        }
        Some(Self { head_index, head_hash, anchored_at, signature })
    }
}

/// Parses the `anchor` lines of a transparency-log file. Measurement pin
/// lines living in the same file are ignored; malformed anchor lines are
/// returned as `Err(line_number)` so verification can flag them.
pub fn parse_anchor_file(text: &str) -> Vec<std::result::Result<AnchorRecord, usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with("anchor"))
        .map(|(i, l)| AnchorRecord::from_line(l.trim()).ok_or(i + 1))
        .collect()
}

/// Appends an `anchor` audit entry, signs the resulting head and writes the
/// record to the transparency log.
pub fn anchor_head(log: &AuditLog, enclave: &Enclave, anchor_path: &Path) -> Result<AnchorRecord> {
    let head = log.append(AuditEvent::new("system", "anchor", "transparency-log", "allow"))?;
    let anchored_at = enclave.now();
    let signature = enclave.sign(&AnchorRecord::signed_bytes(head.index, &head.entry_hash, anchored_at));
    let record = AnchorRecord { head_index: head.index, head_hash: head.entry_hash, anchored_at, signature };
    let write = || -> std::io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(anchor_path)?;
        writeln!(f, "{}", record.to_line())?;
        f.sync_data()
    };
    write().map_err(|e| Error::Anchor(format!("{}: {e}", anchor_path.display())))?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainIssue {
    /// Record stream unreadable from this position on.
    Corrupt { index: u64 },
    IndexGap { position: u64, found: u64 },
    BrokenLink { index: u64 },
    BadHash { index: u64 },
    BadAnchor { head_index: u64 },
    MalformedAnchor { line: usize },
    /// An anchored head lies beyond the end of the log.
    TruncatedAfterAnchor { head_index: u64, log_len: u64 },
    /// Entry at the anchored index exists but hashes differently (fork).
    ForkAtAnchor { head_index: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChainReport {
    pub entries_checked: u64,
    pub anchors_checked: usize,
    pub issues: Vec<ChainIssue>,
}

impl ChainReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    /// Lowest entry index implicated by any issue.
    pub fn first_bad_index(&self) -> Option<u64> {
        self.issues
            .iter()
            .filter_map(|i| match *i {
                ChainIssue::Corrupt { index } | ChainIssue::BrokenLink { index } | ChainIssue::BadHash { index } => Some(index),
                ChainIssue::IndexGap { position, .. } => Some(position),
                ChainIssue::TruncatedAfterAnchor { log_len, .. } => Some(log_len),
                ChainIssue::ForkAtAnchor { head_index } => Some(head_index),
                _ => None,
            })
            .min()
    }
}

/// Recomputes every link and checks every anchor against the chain.
pub fn verify_chain(entries: &[AuditEntry], anchors: &[std::result::Result<AnchorRecord, usize>], pk: &VerifyingKey) -> ChainReport {
    let mut report = ChainReport { entries_checked: entries.len() as u64, anchors_checked: anchors.len(), issues: Vec::new() };
    let mut prev = GENESIS_PREV;
    for (pos, e) in entries.iter().enumerate() {
        let pos = pos as u64;
        if e.index != pos {
            report.issues.push(ChainIssue::IndexGap { position: pos, found: e.index });
            break;
        }
        if e.prev_hash != prev {
            report.issues.push(ChainIssue::BrokenLink { index: pos });
            break;
        }
        if e.compute_hash() != e.entry_hash {
            report.issues.push(ChainIssue::BadHash { index: pos });
            break;
        }
        prev = e.entry_hash;
    }
    for a in anchors {
        match a {
            Err(line) => report.issues.push(ChainIssue::MalformedAnchor { line: *line }),
            Ok(a) if !a.verify(pk) => report.issues.push(ChainIssue::BadAnchor { head_index: a.head_index }),
            Ok(a) => match entries.get(a.head_index as usize) {
                None => report.issues.push(ChainIssue::TruncatedAfterAnchor { head_index: a.head_index, log_len: entries.len() as u64 }),
                Some(e) if e.entry_hash != a.head_hash => report.issues.push(ChainIssue::ForkAtAnchor { head_index: a.head_index }),
                Some(_) => {}
            },
        }
    }
    report
}

/// Verifies a log file against an anchor file, the way `memtrust verify-log`
/// does.
pub fn verify_log_files(log_path: &Path, anchor_path: &Path, pk: &VerifyingKey) -> Result<ChainReport> {
    let parsed = read_log_file(log_path)?;
    let anchors_text = match fs::read_to_string(anchor_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let mut report = verify_chain(&parsed.entries, &parse_anchor_file(&anchors_text), pk);
    if let Some(index) = parsed.corrupt_at {
        report.issues.insert(0, ChainIssue::Corrupt { index });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Session tickets
// ---------------------------------------------------------------------------

pub const DEFAULT_TICKET_TTL_SECS: u64 = 15 * 60;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTicket {
    pub session_id: String,
    pub client_id: String,
    pub measurement: Measurement,
    #[serde(with = "hexser")]
    pub channel_binding: Hash32,
    pub issued_at: u64,
    pub expires_at: u64,
    #[serde(with = "hexser")]
    pub signature: [u8; 64],
}

#[derive(Serialize)]
struct TicketBody<'a> {
    session_id: &'a str,
    client_id: &'a str,
    measurement: &'a Measurement,
    #[serde(with = "hexser")]
    channel_binding: &'a Hash32,
    issued_at: u64,
    expires_at: u64,
}

impl SessionTicket {
    fn signed_bytes(&self) -> Vec<u8> {
        let body = TicketBody {
            session_id: &self.session_id,
            client_id: &self.client_id,
            measurement: &self.measurement,
            channel_binding: &self.channel_binding,
            issued_at: self.issued_at,
            expires_at: self.expires_at,
        };
        let mut msg = b"memtrust-ticket-v1".to_vec();
        msg.extend(canonical::to_canonical_vec(&body).expect("ticket body serializes"));
        msg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TicketCheck {
    Valid,
    BadSignature,
    Expired,
    ChannelMismatch,
    MeasurementMismatch,
}

impl TicketCheck {
    pub fn is_valid(self) -> bool {
        self == TicketCheck::Valid
    }

    pub fn reason(self) -> &'static str {
        match self {
            TicketCheck::Valid => "valid",
            TicketCheck::BadSignature => "bad-signature",
            TicketCheck::Expired => "expired",
            TicketCheck::ChannelMismatch => "channel-mismatch",
            TicketCheck::MeasurementMismatch => "measurement-mismatch",
        }
    }
}

pub fn channel_binding(channel_key: &Key32) -> Hash32 {
    crypto::sha256(channel_key)
}

pub fn issue_ticket(enclave: &Enclave, session_id: &str, client_id: &str, channel_key: &Key32, ttl_secs: u64) -> SessionTicket {
    let issued_at = enclave.now();
    let mut t = SessionTicket {
        session_id: session_id.into(),
        client_id: client_id.into(),
        measurement: enclave.measurement(),
        channel_binding: channel_binding(channel_key),
        issued_at,
        expires_at: issued_at + ttl_secs,
        signature: [0; 64],
    };
    t.signature = enclave.sign(&t.signed_bytes());
    t
}

/// Checks signature, expiry, channel binding and measurement, in that order.
pub fn validate_ticket(
    ticket: &SessionTicket,
    channel_key: &Key32,
    current: &Measurement,
    pk: &VerifyingKey,
    now: u64,
) -> TicketCheck {
    if !tee_sim::verify_signature(pk, &ticket.signed_bytes(), &ticket.signature) {
        TicketCheck::BadSignature
    } else if now >= ticket.expires_at {
        TicketCheck::Expired
    } else if !crypto::ct_eq(&ticket.channel_binding, &channel_binding(channel_key)) {
        TicketCheck::ChannelMismatch
    } else if &ticket.measurement != current {
        TicketCheck::MeasurementMismatch
    } else {
        TicketCheck::Valid
    }
}
