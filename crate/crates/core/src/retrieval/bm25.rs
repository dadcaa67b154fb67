//! Inverted index with Okapi BM25 scoring.

use std::collections::{BTreeMap, HashMap};

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

/// Lower-cased runs of alphanumerics and underscores.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct InvertedIndex {
    /// term → (doc, tf), kept sorted by doc id.
    postings: HashMap<String, Vec<(String, u32)>>,
    doc_lengths: BTreeMap<String, u32>,
    total_len: u64,
}

impl InvertedIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        if self.doc_lengths.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.doc_lengths.len() as f64
        }
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Indexes `text` under `doc_id`, replacing any earlier version.
    pub fn add(&mut self, doc_id: &str, text: &str) {
        self.remove(doc_id);
        let tokens = tokenize(text);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (term, n) in tf {
            let list = self.postings.entry(term).or_default();
            let pos = list.partition_point(|(d, _)| d.as_str() < doc_id);
            list.insert(pos, (doc_id.to_string(), n));
        }
        self.doc_lengths.insert(doc_id.to_string(), tokens.len() as u32);
        self.total_len += tokens.len() as u64;
    }

    pub fn remove(&mut self, doc_id: &str) -> bool {
        let Some(len) = self.doc_lengths.remove(doc_id) else { return false };
        self.total_len -= len as u64;
        self.postings.retain(|_, list| {
            if let Ok(pos) = list.binary_search_by(|(d, _)| d.as_str().cmp(doc_id)) {
                list.remove(pos);
            }
            !list.is_empty()
        });
        true
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_lengths.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score for every document matching at least one query term.
    pub fn scores(&self, terms: &[String]) -> BTreeMap<String, f64> {
        let avgdl = self.avgdl();
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for term in terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for (doc, tf) in list {
                let tf = *tf as f64;
                let dl = self.doc_lengths[doc] as f64;
                let s = idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * dl / avgdl));
                *out.entry(doc.clone()).or_default() += s;
            }
        }
        out
    }

    /// Top `top_n` documents for `query`, best first, ties by doc id.
    pub fn keyword_recall(&self, query: &str, top_n: usize) -> Vec<(String, f64)> {
        let terms = tokenize(query);
        let mut v: Vec<(String, f64)> = self.scores(&terms).into_iter().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(top_n);
        v
    }

    /// Posting lists are sorted and lengths add up.
    pub fn check_consistency(&self) -> bool {
        let sorted = self.postings.values().all(|l| l.windows(2).all(|w| w[0].0 < w[1].0));
        let total: u64 = self.doc_lengths.values().map(|&l| l as u64).sum();
        let tf_total: u64 = self.postings.values().flat_map(|l| l.iter().map(|(_, tf)| *tf as u64)).sum();
        sorted && total == self.total_len && tf_total == total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> InvertedIndex {
        let mut ix = InvertedIndex::new();
        ix.add("d1", "the cat sat on the mat");
        ix.add("d2", "the dog sat");
        ix.add("d3", "cat cat dog");
        ix
    }

    #[test]
    fn three_document_oracle() {
        // Scores worked by hand (N = 3, avgdl = 4) and checked with Python's
        // math module in double precision.
        let ix = toy();
        let s = ix.scores(&tokenize("cat dog"));
        let want = [
            ("d1", 0.390_191_692_204_006_96),
            ("d2", 0.523_548_346_501_579),
            ("d3", 1.218_679_764_545_692_4),
        ];
        for (d, v) in want {
            assert!((s[d] - v).abs() < 1e-9, "{d}: {} vs {v}", s[d]);
        }
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let ix = toy();
        assert_eq!(ix.scores(&tokenize("cat")), ix.scores(&tokenize("cat zebra")));
        assert!(ix.keyword_recall("", 10).is_empty());
    }

    #[test]
    fn duplicate_documents_score_equally() {
        let mut ix = toy();
        ix.add("d4", "the dog sat");
        let s = ix.scores(&tokenize("dog sat"));
        assert_eq!(s["d2"], s["d4"]);
    }

    #[test]
    fn remove_restores_stats() {
        let mut ix = toy();
        ix.add("x", "zebra zebra");
        assert!(ix.remove("x"));
        assert_eq!(ix.doc_freq("zebra"), 0);
        assert_eq!(ix.avgdl(), 4.0);
        assert!(ix.check_consistency());
    }

    #[test]
    fn placeholders_tokenize_whole() {
        assert_eq!(tokenize("ping [PERSON_1] now"), vec!["ping", "person_1", "now"]);
    }

    proptest! {
        #[test]
        fn index_stays_consistent(ops in proptest::collection::vec((0u8..6, "[a-c ]{0,12}", any::<bool>()), 1..40)) {
            let mut ix = InvertedIndex::new();
            for (doc, text, add) in ops {
                let id = format!("d{doc}");
                if add { ix.add(&id, &text); } else { ix.remove(&id); }
                prop_assert!(ix.check_consistency());
            }
        }
    }
}
