//! Popularity, BM25 and dense retrieval over track pseudo-documents.

mod bm25;
mod dense;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Params, Bm25Retriever, InvertedIndex};
pub use dense::{contrastive_loss_and_grad, DenseConfig, DenseRetriever};

use crate::corpus::Corpus;
use crate::decoder::RankedList;
use crate::error::{Error, Result};

/// Separator between playlist titles inside a document.
pub const TITLE_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackDocument {
    pub track_key: String,
    pub text: String,
}

/// One document per track, in corpus track order: the titles of the train
/// playlists containing it, in train order.
pub fn build_documents(corpus: &Corpus) -> Vec<TrackDocument> {
    let mut titles: Vec<Vec<&str>> = vec![Vec::new(); corpus.tracks().len()];
    for p in corpus.train_playlists() {
        let mut seen = std::collections::HashSet::new();
        for k in &p.track_keys {
            if seen.insert(k.as_str()) {
                let i = corpus.track_position(k).expect("validated corpus");
                titles[i].push(&p.title);
            }
        }
    }
    corpus
        .tracks()
        .iter()
        .zip(titles)
        .map(|(t, ts)| TrackDocument {
            track_key: t.track_key.clone(),
            text: ts.join(TITLE_SEPARATOR),
        })
        .collect()
}

/// Query-independent ranking by popularity, ties by ascending key.
pub fn popularity_retrieve(corpus: &Corpus, k: usize) -> RankedList {
    let mut tracks: Vec<(&str, u64)> = corpus.tracks().iter().map(|t| (t.track_key.as_str(), t.popularity)).collect();
    tracks.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    RankedList {
        items: tracks.into_iter().take(k).map(|(key, p)| (key.to_string(), p as f64)).collect(),
    }
}

/// Sorts `(key, score)` by score descending, ties by ascending key, and
/// keeps the top `k`.
pub(crate) fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> RankedList {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    RankedList { items: scored }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineMethod {
    #[serde(rename = "popularity")]
    Popularity,
    #[serde(rename = "bm25")]
    Bm25,
    #[serde(rename = "dense-zs")]
    DenseZeroShot,
    #[serde(rename = "dense-ft")]
    DenseFineTuned,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [
        BaselineMethod::Popularity,
        BaselineMethod::Bm25,
        BaselineMethod::DenseZeroShot,
        BaselineMethod::DenseFineTuned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::Popularity => "popularity",
            BaselineMethod::Bm25 => "bm25",
            BaselineMethod::DenseZeroShot => "dense-zs",
            BaselineMethod::DenseFineTuned => "dense-ft",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("method", format!("unknown baseline `{s}`")))
    }
}

/// A fitted baseline.
pub enum Baseline {
    Popularity(RankedList),
    Bm25(Bm25Retriever),
    Dense(DenseRetriever),
}

impl Baseline {
    pub fn fit(method: BaselineMethod, corpus: &Corpus, dense: &DenseConfig) -> Result<Self> {
        Ok(match method {
            BaselineMethod::Popularity => Baseline::Popularity(popularity_retrieve(corpus, corpus.tracks().len())),
            BaselineMethod::Bm25 => Baseline::Bm25(Bm25Retriever::new(corpus, Bm25Params::default())),
            BaselineMethod::DenseZeroShot => Baseline::Dense(DenseRetriever::zero_shot(corpus, dense)?),
            BaselineMethod::DenseFineTuned => Baseline::Dense(DenseRetriever::fine_tuned(corpus, dense)?),
        })
    }

    pub fn retrieve(&self, query: &str, k: usize) -> RankedList {
        match self {
            Baseline::Popularity(all) => RankedList {
                items: all.items.iter().take(k).cloned().collect(),
            },
            Baseline::Bm25(r) => r.retrieve(query, k),
            Baseline::Dense(r) => r.retrieve(query, k),
        }
    }
}
