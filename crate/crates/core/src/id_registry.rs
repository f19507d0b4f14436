//! Track <-> identifier maps for every ID strategy.
//!
//! A registry is built once from a corpus and is immutable afterwards. The
//! reverse side is a multimap whose buckets are ordered by popularity
//! (descending, ties by ascending track key); generated strings resolve to
//! that ordered bucket.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::semantic_ids::{self, assign_semantic_ids, CollisionStats, Dictionary};
use crate::util;

pub const SEPARATOR: &str = "_";
pub const DEFAULT_COUNTER_BASE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "content")]
    Content,
    #[serde(rename = "track-int")]
    TrackInt,
    #[serde(rename = "artist-int-track-seq")]
    ArtistIntTrackSeq,
    #[serde(rename = "artist-iid-track-seq")]
    ArtistIidTrackSeq,
    #[serde(rename = "semantic")]
    Semantic,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Content => "content",
            Strategy::TrackInt => "track-int",
            Strategy::ArtistIntTrackSeq => "artist-int-track-seq",
            Strategy::ArtistIidTrackSeq => "artist-iid-track-seq",
            Strategy::Semantic => "semantic",
        }
    }

    /// Whether every track is guaranteed its own identifier.
    pub fn uniquely_identifies(self) -> bool {
        self != Strategy::Semantic
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "content" => Strategy::Content,
            "track-int" => Strategy::TrackInt,
            "artist-int-track-seq" => Strategy::ArtistIntTrackSeq,
            "artist-iid-track-seq" => Strategy::ArtistIidTrackSeq,
            "semantic" => Strategy::Semantic,
            other => return Err(Error::config("strategy", format!("unknown strategy `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct IdRegistry {
    strategy: Strategy,
    forward: Vec<(String, String)>,
    forward_index: HashMap<String, usize>,
    reverse: HashMap<String, Vec<String>>,
    normalized: HashMap<String, Vec<String>>,
    extra_vocab: Vec<String>,
    fingerprint: String,
    warnings: Vec<String>,
    collisions: Option<CollisionStats>,
}

/// Casefold, trim and collapse internal whitespace.
pub fn normalize_content_id(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl IdRegistry {
    fn assemble(
        corpus: &Corpus,
        strategy: Strategy,
        forward: Vec<(String, String)>,
        extra_vocab: Vec<String>,
        params: &str,
    ) -> Self {
        let mut reverse: HashMap<String, Vec<String>> = HashMap::new();
        for (k, id) in &forward {
            reverse.entry(id.clone()).or_default().push(k.clone());
        }
        let pop = |k: &String| corpus.track(k).map_or(0, |t| t.popularity);
        for bucket in reverse.values_mut() {
            bucket.sort_by(|a, b| pop(b).cmp(&pop(a)).then_with(|| a.cmp(b)));
        }
        let mut normalized: HashMap<String, Vec<String>> = HashMap::new();
        if strategy == Strategy::Content {
            for (k, id) in &forward {
                normalized.entry(normalize_content_id(id)).or_default().push(k.clone());
            }
            for bucket in normalized.values_mut() {
                bucket.sort_by(|a, b| pop(b).cmp(&pop(a)).then_with(|| a.cmp(b)));
            }
        }
        let mut warnings = Vec::new();
        if strategy.uniquely_identifies() {
            let mut shared: Vec<(&String, &Vec<String>)> = reverse.iter().filter(|(_, b)| b.len() > 1).collect();
            shared.sort();
            for (id, bucket) in shared {
                let msg = format!("id `{id}` is shared by {} tracks: {}", bucket.len(), bucket.join(", "));
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let forward_index = forward.iter().enumerate().map(|(i, (k, _))| (k.clone(), i)).collect();
        let fingerprint = util::fingerprint([strategy.as_str(), &corpus.identity(), params]);
        IdRegistry {
            strategy,
            forward,
            forward_index,
            reverse,
            normalized,
            extra_vocab,
            fingerprint,
            warnings,
            collisions: None,
        }
    }

    /// `artist name + "_" + track title`.
    pub fn build_content(corpus: &Corpus) -> Self {
        let forward = corpus
            .tracks()
            .iter()
            .map(|t| {
                let artist = corpus.artist(&t.artist_key).map(|a| a.name.as_str()).unwrap_or("");
                (t.track_key.clone(), format!("{artist}{SEPARATOR}{}", t.title))
            })
            .collect();
        Self::assemble(corpus, Strategy::Content, forward, Vec::new(), "")
    }

    /// A seeded permutation of `[base, base + |tracks|)`, rendered as digits.
    pub fn build_track_int(corpus: &Corpus, counter_base: u64, seed: u64) -> Self {
        let keys: Vec<&str> = corpus.tracks().iter().map(|t| t.track_key.as_str()).collect();
        let ints = seeded_permutation(keys.len(), counter_base, seed, "track-int");
        let forward = keys.iter().zip(ints).map(|(k, i)| (k.to_string(), i.to_string())).collect();
        Self::assemble(corpus, Strategy::TrackInt, forward, Vec::new(), &format!("base={counter_base};seed={seed}"))
    }

    pub fn build_artist_int_track_seq(corpus: &Corpus, counter_base: u64, seed: u64) -> Self {
        let forward = artist_track_ids(corpus, counter_base, seed, &HashSet::new());
        Self::assemble(
            corpus,
            Strategy::ArtistIntTrackSeq,
            forward,
            Vec::new(),
            &format!("base={counter_base};seed={seed}"),
        )
    }

    /// Like [`Self::build_artist_int_track_seq`], but the `top_k` most
    /// popular artists have their integer rendered as one atomic `<n>` token.
    pub fn build_artist_iid_track_seq(corpus: &Corpus, top_k: usize, counter_base: u64, seed: u64) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::config("registry.top_k_artists", "must be >= 1"));
        }
        let mut artist_pop: BTreeMap<&str, u64> = corpus.artists().iter().map(|a| (a.artist_key.as_str(), 0)).collect();
        for t in corpus.tracks() {
            *artist_pop.get_mut(t.artist_key.as_str()).expect("validated") += t.popularity;
        }
        let mut ranked: Vec<(&str, u64)> = artist_pop.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let top: HashSet<String> = ranked.iter().take(top_k).map(|(k, _)| k.to_string()).collect();
        let forward = artist_track_ids(corpus, counter_base, seed, &top);
        let mut vocab: Vec<String> = forward
            .iter()
            .filter_map(|(_, id)| id.split_once(SEPARATOR).map(|(a, _)| a))
            .filter(|a| a.starts_with('<'))
            .map(str::to_string)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        vocab.sort();
        Ok(Self::assemble(
            corpus,
            Strategy::ArtistIidTrackSeq,
            forward,
            vocab,
            &format!("base={counter_base};seed={seed};top_k={top_k}"),
        ))
    }

    /// Semantic IDs from `dict` over `table`. Tracks without an embedding
    /// fall back to a track-int identifier.
    pub fn build_semantic(corpus: &Corpus, table: &EmbeddingTable, dict: &Dictionary, counter_base: u64, seed: u64) -> Result<Self> {
        let assignment = assign_semantic_ids(table, dict)?;
        let by_key: HashMap<&str, String> = assignment.ids.iter().map(|(k, id)| (k.as_str(), id.to_string())).collect();
        let missing: Vec<&str> = corpus
            .tracks()
            .iter()
            .map(|t| t.track_key.as_str())
            .filter(|k| !by_key.contains_key(k))
            .collect();
        let fallback: HashMap<&str, u64> = missing
            .iter()
            .copied()
            .zip(seeded_permutation(missing.len(), counter_base, seed, "semantic-fallback"))
            .collect();
        let mut forward = Vec::with_capacity(corpus.tracks().len());
        for t in corpus.tracks() {
            let k = t.track_key.as_str();
            let id = match by_key.get(k) {
                Some(id) => id.clone(),
                None => fallback[k].to_string(),
            };
            forward.push((k.to_string(), id));
        }
        let params = format!(
            "s={};c={};seed={};emb={};dict={}",
            dict.s(),
            dict.c(),
            dict.seed,
            table.fingerprint(),
            util::fingerprint([dict.to_text()])
        );
        let mut reg = Self::assemble(corpus, Strategy::Semantic, forward, semantic_ids::lexicon(dict.s()), &params);
        reg.collisions = Some(assignment.stats);
        Ok(reg)
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn extra_vocab(&self) -> &[String] {
        &self.extra_vocab
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn collisions(&self) -> Option<CollisionStats> {
        self.collisions
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn id_of(&self, track_key: &str) -> Option<&str> {
        self.forward_index.get(track_key).map(|&i| self.forward[i].1.as_str())
    }

    /// `(track_key, id)` in corpus track order.
    pub fn forward(&self) -> &[(String, String)] {
        &self.forward
    }

    /// Distinct identifiers, sorted.
    pub fn distinct_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.reverse.keys().map(String::as_str).collect();
        ids.sort_unstable();
        ids
    }

    pub fn bucket(&self, id: &str) -> Option<&[String]> {
        self.reverse.get(id).map(Vec::as_slice)
    }

    /// Tracks for a generated identifier, most popular first. Unknown
    /// strings resolve to an empty list.
    pub fn resolve(&self, id: &str) -> Vec<String> {
        if let Some(b) = self.reverse.get(id) {
            return b.clone();
        }
        if self.strategy == Strategy::Content {
            if let Some(b) = self.normalized.get(&normalize_content_id(id)) {
                return b.clone();
            }
        }
        Vec::new()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.strategy, self.fingerprint);
        for (k, id) in &self.forward {
            s.push_str(k);
            s.push('\t');
            s.push_str(id);
            s.push('\n');
        }
        s.push_str("#VOCAB\n");
        for v in &self.extra_vocab {
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    /// Parses a registry file; `corpus` supplies popularity for bucket order.
    pub fn from_text(text: &str, corpus: &Corpus) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty registry file".into()))?;
        let (strategy, fingerprint) = header
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad registry header `{header}`")))?;
        let strategy: Strategy = strategy.parse()?;
        let mut forward = Vec::new();
        let mut vocab = Vec::new();
        let mut in_vocab = false;
        for line in lines {
            if line == "#VOCAB" {
                in_vocab = true;
            } else if in_vocab {
                vocab.push(line.to_string());
            } else {
                let (k, id) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Format(format!("bad registry line `{line}`")))?;
                if corpus.track(k).is_none() {
                    return Err(Error::UnknownTrack(k.to_string()));
                }
                forward.push((k.to_string(), id.to_string()));
            }
        }
        let mut reg = Self::assemble(corpus, strategy, forward, vocab, "");
        reg.fingerprint = fingerprint.to_string();
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(util::write_atomic(path, self.to_text().as_bytes())?)
    }

    pub fn load(path: &Path, corpus: &Corpus) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, corpus)
    }
}

fn seeded_permutation(n: usize, base: u64, seed: u64, label: &str) -> Vec<u64> {
    let mut v: Vec<u64> = (base..base + n as u64).collect();
    v.shuffle(&mut util::rng(seed, label));
    v
}

/// Artist integers are a seeded permutation over `[base, base + |artists|)`;
/// tracks are numbered from `base` within their artist in order of first
/// appearance in the train pairs, then unseen tracks by ascending key.
fn artist_track_ids(corpus: &Corpus, base: u64, seed: u64, atomic: &HashSet<String>) -> Vec<(String, String)> {
    let artist_ints: HashMap<&str, u64> = corpus
        .artists()
        .iter()
        .map(|a| a.artist_key.as_str())
        .zip(seeded_permutation(corpus.artists().len(), base, seed, "artist-int"))
        .collect();

    let mut order: Vec<&str> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for q in corpus.train_queries() {
        for k in &q.relevant_track_keys {
            if seen.insert(k.as_str()) {
                order.push(k.as_str());
            }
        }
    }
    let mut unseen: Vec<&str> = corpus
        .tracks()
        .iter()
        .map(|t| t.track_key.as_str())
        .filter(|k| !seen.contains(k))
        .collect();
    unseen.sort_unstable();
    order.extend(unseen);

    let mut next_seq: HashMap<&str, u64> = HashMap::new();
    let mut ids: HashMap<&str, String> = HashMap::new();
    for k in order {
        let artist = corpus.track(k).expect("validated").artist_key.as_str();
        let seq = next_seq.entry(artist).or_insert(base);
        let a = artist_ints[artist];
        let artist_part = if atomic.contains(artist) { format!("<{a}>") } else { a.to_string() };
        ids.insert(k, format!("{artist_part}{SEPARATOR}{seq}"));
        *seq += 1;
    }
    corpus
        .tracks()
        .iter()
        .map(|t| (t.track_key.clone(), ids.remove(t.track_key.as_str()).expect("every track numbered")))
        .collect()
}
