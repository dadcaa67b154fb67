//! Rule-based PII detection and placeholder substitution.
//!
//! Matches from every rule are pooled and resolved leftmost first, longest
//! first at equal start. Each accepted span is replaced by `[CATEGORY_n]`
//! from a per-session [`MappingTable`], so one entity keeps one placeholder
//! for the whole session.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tee_sim::{Enclave, SealedBlob};

/// Placeholder surface form. Also used to catch placeholder-shaped text in
/// the input so a round trip never confuses user text with a token.
pub static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([A-Z][A-Z0-9]*)_([1-9][0-9]*)\]").expect("static regex"));

const EMAIL: &str = r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}";
const PHONE: &str = r"(?:\+\d{1,3}[ .-]?)?(?:\(\d{3}\)[ .-]?|\b\d{3}[ .-])\d{3}[ .-]\d{4}\b";
const CARD: &str = r"\b\d(?:[ -]?\d){12,18}\b";

/// Category used for placeholder-shaped text already present in the input.
pub const LITERAL_CATEGORY: &str = "TOKEN";

#[derive(Clone, Debug)]
enum Matcher {
    Pattern(Regex),
    /// Digit runs accepted only if they pass the Luhn check.
    Card(Regex),
}

#[derive(Clone, Debug)]
pub struct Rule {
    pub category: String,
    matcher: Matcher,
}

#[derive(Clone, Debug, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

pub fn luhn_valid(digits: &str) -> bool {
    let ds: Vec<u32> = digits.chars().filter_map(|c| c.to_digit(10)).collect();
    if !(13..=19).contains(&ds.len()) {
        return false;
    }
    let sum: u32 = ds
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let x = d * 2;
                if x > 9 { x - 9 } else { x }
            } else {
                d
            }
        })
        .sum();
    sum % 10 == 0
}

fn check_category(cat: &str) -> Result<()> {
    if cat.is_empty() || !cat.starts_with(|c: char| c.is_ascii_uppercase()) || !cat.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit()) {
        return Err(Error::InvalidInput(format!("category {cat:?} must be upper-case letters and digits")));
    }
    Ok(())
}

fn names_regex(names: &[String]) -> Result<Option<Regex>> {
    let mut names: Vec<&str> = names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Ok(None);
    }
    names.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    names.dedup();
    let alts: Vec<String> = names.iter().map(|n| regex::escape(n)).collect();
    let re = Regex::new(&format!(r"\b(?:{})\b", alts.join("|"))).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(Some(re))
}

impl RuleSet {
    /// Email, phone, Luhn-checked card numbers and the given person names.
    pub fn standard(names: &[String]) -> Self {
        let mut rs = Self::default();
        rs.push_pattern("EMAIL", EMAIL).expect("static regex");
        rs.push_pattern("PHONE", PHONE).expect("static regex");
        rs.rules.push(Rule { category: "CARD".into(), matcher: Matcher::Card(Regex::new(CARD).expect("static regex")) });
        rs.push_names("PERSON", names).expect("escaped names compile");
        rs
    }

    pub fn push_pattern(&mut self, category: &str, pattern: &str) -> Result<()> {
        check_category(category)?;
        let re = Regex::new(pattern).map_err(|e| Error::InvalidInput(format!("rule {category}: {e}")))?;
        self.rules.push(Rule { category: category.into(), matcher: Matcher::Pattern(re) });
        Ok(())
    }

    pub fn push_names(&mut self, category: &str, names: &[String]) -> Result<()> {
        check_category(category)?;
        if let Some(re) = names_regex(names)? {
            self.rules.push(Rule { category: category.into(), matcher: Matcher::Pattern(re) });
        }
        Ok(())
    }

    /// Parses a rule file. Each line is `CATEGORY<TAB>regex`, or
    /// `@namelist <path>` to add PERSON names, one per line. `CARD` rules
    /// get the Luhn check. Relative name-list paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut rs = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { line: n + 1, message };
            if let Some(rest) = line.strip_prefix("@namelist") {
                let p = rest.trim();
                if p.is_empty() {
                    return Err(err("@namelist needs a path".into()));
                }
                let path = base.join(p);
                let body = fs::read_to_string(&path).map_err(|e| err(format!("{}: {e}", path.display())))?;
                let names: Vec<String> = body.lines().map(str::to_string).collect();
                rs.push_names("PERSON", &names).map_err(|e| err(e.to_string()))?;
                continue;
            }
            let (cat, pat) = line.split_once('\t').ok_or_else(|| err("expected CATEGORY<TAB>regex".into()))?;
            check_category(cat).map_err(|e| err(e.to_string()))?;
            let re = Regex::new(pat).map_err(|e| err(e.to_string()))?;
            let matcher = if cat == "CARD" { Matcher::Card(re) } else { Matcher::Pattern(re) };
            rs.rules.push(Rule { category: cat.into(), matcher });
        }
        Ok(rs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Every accepted rule match, unresolved: `(start, end, category)`.
    pub fn raw_matches(&self, text: &str) -> Vec<(usize, usize, String)> {
        let mut out = Vec::new();
        for r in &self.rules {
            match &r.matcher {
                Matcher::Pattern(re) => {
                    for m in re.find_iter(text) {
                        if !m.is_empty() {
                            out.push((m.start(), m.end(), r.category.clone()));
                        }
                    }
                }
                Matcher::Card(re) => {
                    for m in re.find_iter(text) {
                        if luhn_valid(m.as_str()) {
                            out.push((m.start(), m.end(), r.category.clone()));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub category: String,
    pub placeholder: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizedEvent {
    pub original_len: usize,
    pub text: String,
    /// Byte offsets into the original text.
    pub spans: Vec<Span>,
}

/// Per-session bijection between placeholders and the strings they hide.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    pub session_id: String,
    forward: BTreeMap<String, String>,
    back: BTreeMap<String, String>,
    counters: BTreeMap<String, u64>,
}

impl MappingTable {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self { session_id: session_id.into(), ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn placeholder_for(&self, original: &str) -> Option<&str> {
        self.forward.get(original).map(String::as_str)
    }

    pub fn original_for(&self, placeholder: &str) -> Option<&str> {
        self.back.get(placeholder).map(String::as_str)
    }

    pub fn originals(&self) -> impl Iterator<Item = &str> {
        self.forward.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.back.iter().map(|(p, o)| (p.as_str(), o.as_str()))
    }

    /// Returns the placeholder for `original`, minting the next one in
    /// `category` if needed. The flag is true when the pair is new.
    pub fn intern(&mut self, category: &str, original: &str) -> (String, bool) {
        if let Some(p) = self.forward.get(original) {
            return (p.clone(), false);
        }
        let n = self.counters.entry(category.to_string()).or_insert(0);
        *n += 1;
        let p = format!("[{category}_{n}]");
        self.forward.insert(original.to_string(), p.clone());
        self.back.insert(p.clone(), original.to_string());
        (p, true)
    }

    pub fn clear(&mut self) {
        self.forward.clear();
        self.back.clear();
        self.counters.clear();
    }

    pub fn seal(&self, enclave: &Enclave) -> Result<SealedBlob> {
        Ok(enclave.seal(&serde_json::to_vec(self)?))
    }

    pub fn unseal(enclave: &Enclave, blob: &SealedBlob) -> Result<Self> {
        let plain = enclave.unseal(blob)?;
        serde_json::from_slice(&plain).map_err(|_| Error::Integrity("mapping table is malformed".into()))
    }
}

/// Resolves overlapping candidates: leftmost start wins, then the longer
/// match, then the earlier candidate.
fn resolve(mut cands: Vec<(usize, usize, String)>) -> Vec<(usize, usize, String)> {
    cands.sort_by(|a, b| a.0.cmp(&b.0).then((b.1 - b.0).cmp(&(a.1 - a.0))));
    let mut out: Vec<(usize, usize, String)> = Vec::new();
    let mut pos = 0;
    for c in cands {
        if c.0 >= pos {
            pos = c.1;
            out.push(c);
        }
    }
    out
}

struct Piece {
    text: String,
    /// Offset of this piece in the original text.
    orig: usize,
    token: Option<(String, String)>,
}

fn candidates(text: &str, rules: &RuleSet, table: &MappingTable) -> Vec<(usize, usize, String)> {
    let mut cands = rules.raw_matches(text);
    for (p, original) in table.back.iter() {
        let cat = PLACEHOLDER.captures(p).map(|c| c[1].to_string()).unwrap_or_else(|| LITERAL_CATEGORY.into());
        for (i, _) in text.match_indices(original.as_str()) {
            cands.push((i, i + original.len(), cat.clone()));
        }
    }
    for m in PLACEHOLDER.find_iter(text) {
        cands.push((m.start(), m.end(), LITERAL_CATEGORY.into()));
    }
    cands
}

/// Replaces every rule match, every string the table already hides, and
/// any placeholder-shaped literal with a session placeholder. Inserting a
/// placeholder can expose a new match at its edge, so passes repeat until
/// the remaining plain text is clean. Returns the event and how many table
/// entries were created.
pub fn sanitize_with(text: &str, rules: &RuleSet, table: &mut MappingTable) -> (SanitizedEvent, usize) {
    let mut pieces = vec![Piece { text: text.to_string(), orig: 0, token: None }];
    let mut created = 0;
    loop {
        let mut joined = String::new();
        let mut bounds = Vec::with_capacity(pieces.len());
        for p in &pieces {
            let shown = p.token.as_ref().map_or(p.text.as_str(), |t| t.1.as_str());
            bounds.push((joined.len(), joined.len() + shown.len()));
            joined.push_str(shown);
        }
        let tokens: Vec<(usize, usize)> =
            pieces.iter().zip(&bounds).filter(|(p, _)| p.token.is_some()).map(|(_, b)| *b).collect();
        let cands: Vec<_> = candidates(&joined, rules, table)
            .into_iter()
            .filter(|c| !tokens.iter().any(|t| c.0 < t.1 && t.0 < c.1))
            .collect();
        let chosen = resolve(cands);
        if chosen.is_empty() {
            break;
        }
        let mut next = Vec::with_capacity(pieces.len() + 2 * chosen.len());
        let mut it = chosen.into_iter().peekable();
        for (p, (b0, _)) in pieces.into_iter().zip(bounds) {
            if p.token.is_some() {
                next.push(p);
                continue;
            }
            let mut last = 0;
            while let Some((s, e, _)) = it.peek() {
                let (s, e) = (s - b0, e - b0);
                if e > p.text.len() {
                    break;
                }
                let (_, _, cat) = it.next().expect("peeked");
                if s > last {
                    next.push(Piece { text: p.text[last..s].to_string(), orig: p.orig + last, token: None });
                }
                let original = &p.text[s..e];
                let (ph, new) = table.intern(&cat, original);
                created += usize::from(new);
                next.push(Piece { text: original.to_string(), orig: p.orig + s, token: Some((cat, ph)) });
                last = e;
            }
            if last < p.text.len() {
                next.push(Piece { text: p.text[last..].to_string(), orig: p.orig + last, token: None });
            }
        }
        pieces = next;
    }
    let mut out = String::with_capacity(text.len());
    let mut spans = Vec::new();
    for p in pieces {
        match p.token {
            Some((category, placeholder)) => {
                out.push_str(&placeholder);
                spans.push(Span { start: p.orig, end: p.orig + p.text.len(), category, placeholder });
            }
            None => out.push_str(&p.text),
        }
    }
    (SanitizedEvent { original_len: text.len(), text: out, spans }, created)
}

pub fn sanitize(text: &str, rules: &RuleSet, table: &mut MappingTable) -> SanitizedEvent {
    sanitize_with(text, rules, table).0
}

/// Substitutes every known placeholder. Unknown ones are left in place and
/// returned as warnings.
pub fn restore(text: &str, table: &MappingTable) -> (String, Vec<String>) {
    let mut warnings = Vec::new();
    let out = PLACEHOLDER.replace_all(text, |c: &regex::Captures<'_>| match table.original_for(&c[0]) {
        Some(o) => o.to_string(),
        None => {
            warnings.push(c[0].to_string());
            c[0].to_string()
        }
    });
    (out.into_owned(), warnings)
}
