use std::collections::BTreeMap;

use super::{build_documents, popularity_retrieve, top_k, TrackDocument};
use crate::corpus::Corpus;
use crate::decoder::RankedList;
use crate::embeddings::tokenize_text;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Term postings over documents sorted by track key.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    keys: Vec<String>,
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build(docs: &[TrackDocument]) -> Self {
        let mut sorted: Vec<&TrackDocument> = docs.iter().collect();
        sorted.sort_by(|a, b| a.track_key.cmp(&b.track_key));
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(sorted.len());
        for (i, d) in sorted.iter().enumerate() {
            let terms = tokenize_text(&d.text);
            doc_len.push(terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((i, n));
            }
        }
        let avg_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64
        };
        InvertedIndex {
            keys: sorted.iter().map(|d| d.track_key.clone()).collect(),
            postings,
            doc_len,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.document_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 scores of every document matching at least one query term.
    /// Repeated query terms contribute once per occurrence.
    pub fn score(&self, query: &str, p: Bm25Params) -> Vec<(String, f64)> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for term in tokenize_text(query) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - p.b + p.b * self.doc_len[doc] as f64 / self.avg_len;
                *acc.entry(doc).or_insert(0.0) += idf * tf * (p.k1 + 1.0) / (tf + p.k1 * norm);
            }
        }
        acc.into_iter().map(|(d, s)| (self.keys[d].clone(), s)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Retriever {
    index: InvertedIndex,
    params: Bm25Params,
    fallback: RankedList,
}

impl Bm25Retriever {
    pub fn new(corpus: &Corpus, params: Bm25Params) -> Self {
        Bm25Retriever {
            index: InvertedIndex::build(&build_documents(corpus)),
            params,
            fallback: popularity_retrieve(corpus, corpus.tracks().len()),
        }
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    /// Falls back to popularity when no document matches.
    pub fn retrieve(&self, query: &str, k: usize) -> RankedList {
        let scored = self.index.score(query, self.params);
        if scored.is_empty() {
            return RankedList {
                items: self.fallback.items.iter().take(k).cloned().collect(),
            };
        }
        top_k(scored, k)
    }
}
