//! Tracks, artists, playlists and labeled prompts.
//!
//! A [`Corpus`] is immutable once built. Every constructor goes through
//! [`Corpus::from_parts`], which checks referential integrity and recomputes
//! track popularity from the train-side playlists.

mod io;
pub mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id_registry::IdRegistry;
use crate::util;

pub use io::load_corpus;
pub use synth::{generate_synthetic, SynthConfig};

/// Joins the utterances of a multi-turn prompt into one model input.
pub const TURN_SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artist {
    pub artist_key: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    pub track_key: String,
    pub artist_key: String,
    pub title: String,
    /// Occurrences across train playlists.
    pub popularity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Playlist {
    pub playlist_key: String,
    pub title: String,
    pub track_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub utterances: Vec<String>,
    pub relevant_track_keys: Vec<String>,
    /// Playlist the prompt was derived from, if any. Keeps both on the same
    /// side of a split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub playlist_key: Option<String>,
}

impl LabeledQuery {
    pub fn text(&self) -> String {
        self.utterances.join(TURN_SEPARATOR)
    }
}

/// One `(prompt, track id)` supervision instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub input: String,
    pub target: String,
    /// Position of the source query in the train query list.
    pub query_index: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    artists: Vec<Artist>,
    tracks: Vec<Track>,
    playlists: Vec<Playlist>,
    playlist_is_test: Vec<bool>,
    queries: Vec<LabeledQuery>,
    query_is_test: Vec<bool>,
    artist_index: HashMap<String, usize>,
    track_index: HashMap<String, usize>,
}

impl Corpus {
    /// Validates references and recomputes popularity. All playlists and
    /// queries start on the train side.
    pub fn from_parts(
        artists: Vec<Artist>,
        tracks: Vec<Track>,
        playlists: Vec<Playlist>,
        queries: Vec<LabeledQuery>,
    ) -> Result<Self> {
        let np = playlists.len();
        let nq = queries.len();
        Self::with_sides(artists, tracks, playlists, vec![false; np], queries, vec![false; nq])
    }

    fn with_sides(
        artists: Vec<Artist>,
        mut tracks: Vec<Track>,
        playlists: Vec<Playlist>,
        playlist_is_test: Vec<bool>,
        mut queries: Vec<LabeledQuery>,
        query_is_test: Vec<bool>,
    ) -> Result<Self> {
        let mut artist_index = HashMap::with_capacity(artists.len());
        for (i, a) in artists.iter().enumerate() {
            if a.name.trim().is_empty() {
                return Err(Error::InvalidInput(format!("artist `{}` has an empty name", a.artist_key)));
            }
            if artist_index.insert(a.artist_key.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate artist_key `{}`", a.artist_key)));
            }
        }
        let mut track_index = HashMap::with_capacity(tracks.len());
        for (i, t) in tracks.iter().enumerate() {
            if !artist_index.contains_key(&t.artist_key) {
                return Err(Error::InvalidInput(format!(
                    "track `{}` references unknown artist `{}`",
                    t.track_key, t.artist_key
                )));
            }
            if track_index.insert(t.track_key.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate track_key `{}`", t.track_key)));
            }
        }
        let mut playlist_keys = HashMap::new();
        for (i, p) in playlists.iter().enumerate() {
            if p.track_keys.is_empty() {
                return Err(Error::InvalidInput(format!("playlist `{}` has no tracks", p.playlist_key)));
            }
            if let Some(k) = p.track_keys.iter().find(|k| !track_index.contains_key(*k)) {
                return Err(Error::UnknownTrack(k.clone()));
            }
            playlist_keys.insert(p.playlist_key.clone(), i);
        }
        for q in queries.iter_mut() {
            if q.utterances.is_empty() {
                return Err(Error::InvalidInput("query with no utterances".into()));
            }
            if q.relevant_track_keys.is_empty() {
                return Err(Error::InvalidInput(format!("query `{}` has no relevant tracks", q.text())));
            }
            if let Some(k) = q.relevant_track_keys.iter().find(|k| !track_index.contains_key(*k)) {
                return Err(Error::UnknownTrack(k.clone()));
            }
            if let Some(pk) = &q.playlist_key {
                if !playlist_keys.contains_key(pk) {
                    return Err(Error::InvalidInput(format!("query references unknown playlist `{pk}`")));
                }
            }
            let mut seen = HashSet::new();
            q.relevant_track_keys.retain(|k| seen.insert(k.clone()));
        }

        for t in tracks.iter_mut() {
            t.popularity = 0;
        }
        for (p, _) in playlists.iter().zip(&playlist_is_test).filter(|(_, t)| !**t) {
            for k in &p.track_keys {
                tracks[track_index[k]].popularity += 1;
            }
        }

        Ok(Corpus {
            artists,
            tracks,
            playlists,
            playlist_is_test,
            queries,
            query_is_test,
            artist_index,
            track_index,
        })
    }

    pub fn artists(&self) -> &[Artist] {
        &self.artists
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track(&self, key: &str) -> Option<&Track> {
        self.track_index.get(key).map(|&i| &self.tracks[i])
    }

    pub fn track_position(&self, key: &str) -> Option<usize> {
        self.track_index.get(key).copied()
    }

    pub fn artist(&self, key: &str) -> Option<&Artist> {
        self.artist_index.get(key).map(|&i| &self.artists[i])
    }

    pub fn artist_of(&self, track_key: &str) -> Option<&Artist> {
        self.track(track_key).and_then(|t| self.artist(&t.artist_key))
    }

    pub fn playlists(&self) -> &[Playlist] {
        &self.playlists
    }

    pub fn queries(&self) -> &[LabeledQuery] {
        &self.queries
    }

    pub fn train_playlists(&self) -> impl Iterator<Item = &Playlist> {
        self.playlists.iter().zip(&self.playlist_is_test).filter(|(_, t)| !**t).map(|(p, _)| p)
    }

    pub fn test_playlists(&self) -> impl Iterator<Item = &Playlist> {
        self.playlists.iter().zip(&self.playlist_is_test).filter(|(_, t)| **t).map(|(p, _)| p)
    }

    pub fn train_queries(&self) -> Vec<&LabeledQuery> {
        self.queries.iter().zip(&self.query_is_test).filter(|(_, t)| !**t).map(|(q, _)| q).collect()
    }

    pub fn test_queries(&self) -> Vec<&LabeledQuery> {
        self.queries.iter().zip(&self.query_is_test).filter(|(_, t)| **t).map(|(q, _)| q).collect()
    }

    /// Stable identity of the corpus content and split, used in fingerprints.
    pub fn identity(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for t in &self.tracks {
            parts.push(format!("t\t{}\t{}\t{}", t.track_key, t.artist_key, t.title));
        }
        for (p, side) in self.playlists.iter().zip(&self.playlist_is_test) {
            parts.push(format!("p\t{}\t{}\t{}\t{}", p.playlist_key, side, p.title, p.track_keys.join(",")));
        }
        for (q, side) in self.queries.iter().zip(&self.query_is_test) {
            parts.push(format!("q\t{}\t{}\t{}", side, q.text(), q.relevant_track_keys.join(",")));
        }
        util::fingerprint(parts)
    }

    /// Partitions playlists (and their derived queries) into train and test.
    ///
    /// Test items that would make an unseen track relevant, or whose prompt
    /// text also occurs in train, are moved back to train until stable.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<Corpus> {
        if !(test_fraction > 0.0 && test_fraction < 0.5) {
            return Err(Error::config("test_fraction", format!("must be in (0, 0.5), got {test_fraction}")));
        }
        let mut rng = util::rng(seed, "split");
        let mut playlist_is_test = vec![false; self.playlists.len()];
        let mut order: Vec<usize> = (0..self.playlists.len()).collect();
        order.shuffle(&mut rng);
        let n_test = (test_fraction * self.playlists.len() as f64).floor() as usize;
        for &i in &order[..n_test] {
            playlist_is_test[i] = true;
        }

        let pl_pos: HashMap<&str, usize> =
            self.playlists.iter().enumerate().map(|(i, p)| (p.playlist_key.as_str(), i)).collect();
        let link: Vec<Option<usize>> = self
            .queries
            .iter()
            .map(|q| q.playlist_key.as_deref().and_then(|k| pl_pos.get(k).copied()))
            .collect();
        let mut query_is_test = vec![false; self.queries.len()];
        let free: Vec<usize> = (0..self.queries.len()).filter(|&i| link[i].is_none()).collect();
        let mut free_order = free.clone();
        free_order.shuffle(&mut rng);
        let n_free_test = (test_fraction * free.len() as f64).floor() as usize;
        for &i in &free_order[..n_free_test] {
            query_is_test[i] = true;
        }
        for (i, l) in link.iter().enumerate() {
            if let Some(p) = l {
                query_is_test[i] = playlist_is_test[*p];
            }
        }
        let texts: Vec<String> = self.queries.iter().map(|q| q.text()).collect();

        loop {
            let mut seen_pl: HashSet<&str> = HashSet::new();
            for (p, _) in self.playlists.iter().zip(&playlist_is_test).filter(|(_, t)| !**t) {
                seen_pl.extend(p.track_keys.iter().map(String::as_str));
            }
            let mut seen_q: HashSet<&str> = HashSet::new();
            let mut train_texts: HashSet<&str> = HashSet::new();
            for (i, q) in self.queries.iter().enumerate().filter(|(i, _)| !query_is_test[*i]) {
                seen_q.extend(q.relevant_track_keys.iter().map(String::as_str));
                train_texts.insert(texts[i].as_str());
            }

            let mut move_pl: BTreeSet<usize> = BTreeSet::new();
            let mut move_q: BTreeSet<usize> = BTreeSet::new();
            for (i, p) in self.playlists.iter().enumerate().filter(|(i, _)| playlist_is_test[*i]) {
                if p.track_keys.iter().any(|k| !seen_pl.contains(k.as_str())) {
                    move_pl.insert(i);
                }
            }
            for (i, q) in self.queries.iter().enumerate().filter(|(i, _)| query_is_test[*i]) {
                let unseen = q.relevant_track_keys.iter().any(|k| !seen_q.contains(k.as_str()));
                if unseen || train_texts.contains(texts[i].as_str()) {
                    move_q.insert(i);
                    if let Some(p) = link[i] {
                        move_pl.insert(p);
                    }
                }
            }
            for (i, l) in link.iter().enumerate() {
                if let Some(p) = l {
                    if move_pl.contains(p) {
                        move_q.insert(i);
                    }
                }
            }
            if move_pl.is_empty() && move_q.is_empty() {
                break;
            }
            for i in move_pl {
                playlist_is_test[i] = false;
            }
            for i in move_q {
                query_is_test[i] = false;
            }
        }

        Corpus::with_sides(
            self.artists.clone(),
            self.tracks.clone(),
            self.playlists.clone(),
            playlist_is_test,
            self.queries.clone(),
            query_is_test,
        )
    }
}

/// One pair per (train query, relevant track), in query then label order.
pub fn to_training_pairs(train_queries: &[&LabeledQuery], registry: &IdRegistry) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for (qi, q) in train_queries.iter().enumerate() {
        let input = q.text();
        for k in &q.relevant_track_keys {
            let target = registry.id_of(k).ok_or_else(|| Error::UnknownTrack(k.clone()))?;
            pairs.push(TrainingPair {
                input: input.clone(),
                target: target.to_string(),
                query_index: qi,
            });
        }
    }
    Ok(pairs)
}
