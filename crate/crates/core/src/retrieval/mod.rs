//! Multi-path recall: keyword (BM25), vector (HNSW) and graph traversal,
//! fused into one ranked [`ContextFrame`].

pub mod bm25;
pub mod buckets;
pub mod hnsw;

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

pub const HOP_DECAY: f64 = 0.5;
pub const DEFAULT_HALF_LIFE_SECS: u64 = 7 * 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Keyword,
    Vector,
    Graph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub doc_id: String,
    pub source: Source,
    pub raw_score: f64,
}

/// At most one entry per (doc, source); a repeated insert keeps the higher
/// score.
#[derive(Clone, Debug, Default)]
pub struct CandidateSet {
    entries: BTreeMap<(String, Source), f64>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: &str, source: Source, raw_score: f64) {
        if !raw_score.is_finite() {
            return;
        }
        let e = self.entries.entry((doc_id.to_string(), source)).or_insert(f64::NEG_INFINITY);
        if raw_score > *e {
            *e = raw_score;
        }
    }

    pub fn extend(&mut self, source: Source, hits: impl IntoIterator<Item = (String, f64)>) {
        for (d, s) in hits {
            self.insert(&d, source, s);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Candidate> + '_ {
        self.entries.iter().map(|((d, s), v)| Candidate { doc_id: d.clone(), source: *s, raw_score: *v })
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|(d, _), _| keep(d));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub keyword: f64,
    pub vector: f64,
    pub graph: f64,
    pub recency: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { keyword: 0.3, vector: 0.5, graph: 0.2, recency: 0.1 }
    }
}

impl FusionWeights {
    pub fn of(&self, s: Source) -> f64 {
        match s {
            Source::Keyword => self.keyword,
            Source::Vector => self.vector,
            Source::Graph => self.graph,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub doc_id: String,
    pub fused_score: f64,
    pub sources: Vec<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFrame {
    pub query_id: String,
    pub entries: Vec<ContextEntry>,
}

/// Min-max normalises each source, adds the weighted recency term
/// `2^(-age / half_life)` and sorts descending, ties by doc id. A source
/// whose scores are all equal normalises to 1.
pub fn fuse(
    query_id: &str,
    candidates: &CandidateSet,
    weights: &FusionWeights,
    half_life_secs: f64,
    now: u64,
    timestamp: impl Fn(&str) -> Option<u64>,
) -> ContextFrame {
    let mut range: HashMap<Source, (f64, f64)> = HashMap::new();
    for c in candidates.iter() {
        let r = range.entry(c.source).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        r.0 = r.0.min(c.raw_score);
        r.1 = r.1.max(c.raw_score);
    }
    let mut per_doc: BTreeMap<String, (f64, Vec<Source>)> = BTreeMap::new();
    for c in candidates.iter() {
        let (lo, hi) = range[&c.source];
        let norm = if hi > lo { (c.raw_score - lo) / (hi - lo) } else { 1.0 };
        let e = per_doc.entry(c.doc_id.clone()).or_insert((0.0, Vec::new()));
        e.0 += weights.of(c.source) * norm;
        e.1.push(c.source);
    }
    let mut entries: Vec<ContextEntry> = per_doc
        .into_iter()
        .map(|(doc_id, (score, sources))| {
            let recency = match timestamp(&doc_id) {
                Some(ts) if half_life_secs > 0.0 => (-(now.saturating_sub(ts) as f64) / half_life_secs).exp2(),
                _ => 0.0,
            };
            ContextEntry { fused_score: score + weights.recency * recency, doc_id, sources, text: None }
        })
        .collect();
    entries.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    ContextFrame { query_id: query_id.to_string(), entries }
}

/// Read access to the profile graph for traversal.
pub trait GraphView {
    /// Neighbours of `node` with the confidence of the connecting edge.
    /// Unknown nodes have none.
    fn neighbors(&self, node: &str) -> Vec<(String, f64)>;
    fn contains(&self, node: &str) -> bool;
}

/// Breadth-first traversal from `seeds` up to `max_hops`. Seeds score 1; a
/// node first reached at hop `h` scores the reaching edge's confidence times
/// `0.5^h`, keeping the best such edge.
pub fn graph_recall(graph: &dyn GraphView, seeds: &[String], max_hops: usize) -> Vec<(String, f64)> {
    let mut best: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut queue = VecDeque::new();
    for s in seeds {
        if graph.contains(s) && !best.contains_key(s) {
            best.insert(s.clone(), (0, 1.0));
            queue.push_back(s.clone());
        }
    }
    while let Some(node) = queue.pop_front() {
        let hop = best[&node].0;
        if hop >= max_hops {
            continue;
        }
        for (n, conf) in graph.neighbors(&node) {
            let score = conf * HOP_DECAY.powi(hop as i32 + 1);
            match best.get_mut(&n) {
                None => {
                    best.insert(n.clone(), (hop + 1, score));
                    queue.push_back(n);
                }
                Some((h, s)) if *h == hop + 1 && score > *s => *s = score,
                _ => {}
            }
        }
    }
    let mut out: Vec<(String, f64)> = best.into_iter().map(|(n, (_, s))| (n, s)).collect();
    hnsw::sort_hits(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Mem(BTreeMap<String, Vec<(String, f64)>>);

    impl GraphView for Mem {
        fn neighbors(&self, node: &str) -> Vec<(String, f64)> {
            self.0.get(node).cloned().unwrap_or_default()
        }
        fn contains(&self, node: &str) -> bool {
            self.0.contains_key(node)
        }
    }

    fn chain() -> Mem {
        let mut m = BTreeMap::new();
        m.insert("a".into(), vec![("b".into(), 0.8)]);
        m.insert("b".into(), vec![("a".into(), 0.8), ("c".into(), 0.6)]);
        m.insert("c".into(), vec![("b".into(), 0.6)]);
        Mem(m)
    }

    #[test]
    fn zero_hops_is_seeds_only() {
        assert_eq!(graph_recall(&chain(), &["a".into()], 0), vec![("a".to_string(), 1.0)]);
    }

    #[test]
    fn two_hop_chain_decays() {
        let r: BTreeMap<String, f64> = graph_recall(&chain(), &["a".into()], 2).into_iter().collect();
        assert_eq!(r["b"], 0.8 * 0.5);
        assert_eq!(r["c"], 0.6 * 0.25);
        assert_eq!(r["a"], 1.0);
    }

    #[test]
    fn unknown_seed_contributes_nothing() {
        assert!(graph_recall(&chain(), &["zzz".into()], 3).is_empty());
    }

    #[test]
    fn single_source_preserves_order() {
        let mut c = CandidateSet::new();
        for (d, s) in [("x", 3.0), ("y", 9.0), ("z", 1.0)] {
            c.insert(d, Source::Keyword, s);
        }
        let w = FusionWeights { keyword: 1.0, vector: 0.0, graph: 0.0, recency: 0.0 };
        let f = fuse("q", &c, &w, 1.0, 0, |_| None);
        let order: Vec<&str> = f.entries.iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(order, ["y", "x", "z"]);
    }

    #[test]
    fn recency_only_is_newest_first() {
        let mut c = CandidateSet::new();
        for d in ["old", "new", "mid"] {
            c.insert(d, Source::Vector, 0.5);
        }
        let ts = |d: &str| Some(match d { "old" => 10, "mid" => 500, _ => 900 });
        let w = FusionWeights { keyword: 0.0, vector: 0.0, graph: 0.0, recency: 1.0 };
        let f = fuse("q", &c, &w, 100.0, 1000, ts);
        let order: Vec<&str> = f.entries.iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(order, ["new", "mid", "old"]);
    }

    #[test]
    fn four_candidate_worked_example() {
        // keyword: A=2, B=4, C=6 → norm 0, 0.5, 1
        // vector:  A=0.9, D=0.5   → norm 1, 0
        // graph:   D=0.25         → norm 1 (single value)
        // ages (half-life 100 s): A=0, B=100, C=200, D=300
        //   recency 1, 0.5, 0.25, 0.125
        // fused with weights 0.3 / 0.5 / 0.2 / 0.1:
        //   A = 0.3·0 + 0.5·1 + 0.1·1      = 0.6
        //   B = 0.3·0.5 + 0.1·0.5          = 0.2
        //   C = 0.3·1 + 0.1·0.25           = 0.325
        //   D = 0.5·0 + 0.2·1 + 0.1·0.125  = 0.2125
        let mut c = CandidateSet::new();
        c.insert("A", Source::Keyword, 2.0);
        c.insert("B", Source::Keyword, 4.0);
        c.insert("C", Source::Keyword, 6.0);
        c.insert("A", Source::Vector, 0.9);
        c.insert("D", Source::Vector, 0.5);
        c.insert("D", Source::Graph, 0.25);
        let ts = |d: &str| Some(1000 - match d { "A" => 0, "B" => 100, "C" => 200, _ => 300 });
        let f = fuse("q", &c, &FusionWeights::default(), 100.0, 1000, ts);
        let got: Vec<(&str, f64)> = f.entries.iter().map(|e| (e.doc_id.as_str(), e.fused_score)).collect();
        let want = [("A", 0.6), ("C", 0.325), ("D", 0.2125), ("B", 0.2)];
        for ((gd, gs), (wd, ws)) in got.iter().zip(want) {
            assert_eq!(*gd, wd);
            assert!((gs - ws).abs() < 1e-12, "{gd}: {gs} vs {ws}");
        }
    }

    #[test]
    fn ties_break_by_doc_id_and_fusion_is_deterministic() {
        let mut c = CandidateSet::new();
        for d in ["b", "a", "c"] {
            c.insert(d, Source::Graph, 1.0);
        }
        let f1 = fuse("q", &c, &FusionWeights::default(), 10.0, 0, |_| None);
        let f2 = fuse("q", &c, &FusionWeights::default(), 10.0, 0, |_| None);
        assert_eq!(f1, f2);
        assert_eq!(f1.entries.iter().map(|e| e.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn candidate_set_keeps_one_entry_per_doc_source() {
        let mut c = CandidateSet::new();
        c.insert("a", Source::Vector, 0.1);
        c.insert("a", Source::Vector, 0.7);
        c.insert("a", Source::Vector, f64::NAN);
        c.insert("a", Source::Keyword, 2.0);
        assert_eq!(c.len(), 2);
        assert_eq!(c.iter().find(|x| x.source == Source::Vector).unwrap().raw_score, 0.7);
    }
}
