use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Artist, Corpus, LabeledQuery, Playlist, Track};
use crate::error::{Error, Result};
use crate::util;

pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const PLAYLISTS_FILE: &str = "playlists.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    track_key: String,
    artist_key: String,
    title: String,
    artist_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaylistRecord {
    playlist_key: String,
    title: String,
    track_keys: Vec<String>,
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn integrity(path: &Path, line: usize, msg: String) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

/// Reads the three line-delimited record files and validates references.
pub fn load_corpus(tracks_path: &Path, playlists_path: &Path, queries_path: &Path) -> Result<Corpus> {
    let mut artists: Vec<Artist> = Vec::new();
    let mut artist_names: HashMap<String, String> = HashMap::new();
    let mut tracks = Vec::new();
    let mut track_keys = HashSet::new();
    for (line, r) in read_records::<TrackRecord>(tracks_path)? {
        if !track_keys.insert(r.track_key.clone()) {
            return Err(integrity(tracks_path, line, format!("duplicate track_key `{}`", r.track_key)));
        }
        if r.artist_name.trim().is_empty() {
            return Err(integrity(tracks_path, line, format!("empty artist_name for `{}`", r.artist_key)));
        }
        match artist_names.get(&r.artist_key) {
            Some(n) if *n != r.artist_name => {
                return Err(integrity(
                    tracks_path,
                    line,
                    format!("artist `{}` named both `{n}` and `{}`", r.artist_key, r.artist_name),
                ))
            }
            Some(_) => {}
            None => {
                artist_names.insert(r.artist_key.clone(), r.artist_name.clone());
                artists.push(Artist {
                    artist_key: r.artist_key.clone(),
                    name: r.artist_name,
                });
            }
        }
        tracks.push(Track {
            track_key: r.track_key,
            artist_key: r.artist_key,
            title: r.title,
            popularity: 0,
        });
    }

    let mut playlists = Vec::new();
    let mut playlist_keys = HashSet::new();
    for (line, r) in read_records::<PlaylistRecord>(playlists_path)? {
        if r.track_keys.is_empty() {
            return Err(integrity(playlists_path, line, format!("playlist `{}` has no tracks", r.playlist_key)));
        }
        if let Some(k) = r.track_keys.iter().find(|k| !track_keys.contains(*k)) {
            return Err(integrity(playlists_path, line, format!("unknown track_key `{k}`")));
        }
        if !playlist_keys.insert(r.playlist_key.clone()) {
            return Err(integrity(playlists_path, line, format!("duplicate playlist_key `{}`", r.playlist_key)));
        }
        playlists.push(Playlist {
            playlist_key: r.playlist_key,
            title: r.title,
            track_keys: r.track_keys,
        });
    }

    let mut queries = Vec::new();
    for (line, q) in read_records::<LabeledQuery>(queries_path)? {
        if q.utterances.is_empty() {
            return Err(integrity(queries_path, line, "query has no utterances".into()));
        }
        if q.relevant_track_keys.is_empty() {
            return Err(integrity(queries_path, line, "query has no relevant tracks".into()));
        }
        if let Some(k) = q.relevant_track_keys.iter().find(|k| !track_keys.contains(*k)) {
            return Err(integrity(queries_path, line, format!("unknown track_key `{k}`")));
        }
        if let Some(pk) = q.playlist_key.as_ref().filter(|pk| !playlist_keys.contains(*pk)) {
            return Err(integrity(queries_path, line, format!("unknown playlist_key `{pk}`")));
        }
        queries.push(q);
    }

    Corpus::from_parts(artists, tracks, playlists, queries)
}

impl Corpus {
    /// Loads `tracks.jsonl`, `playlists.jsonl` and `queries.jsonl` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        load_corpus(&dir.join(TRACKS_FILE), &dir.join(PLAYLISTS_FILE), &dir.join(QUERIES_FILE))
    }

    /// Writes the three record files into `dir`. Split sides are not stored.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut tracks = String::new();
        for t in self.tracks() {
            let rec = TrackRecord {
                track_key: t.track_key.clone(),
                artist_key: t.artist_key.clone(),
                title: t.title.clone(),
                artist_name: self.artist(&t.artist_key).map(|a| a.name.clone()).unwrap_or_default(),
            };
            tracks.push_str(&serde_json::to_string(&rec)?);
            tracks.push('\n');
        }
        let mut playlists = String::new();
        for p in self.playlists() {
            let rec = PlaylistRecord {
                playlist_key: p.playlist_key.clone(),
                title: p.title.clone(),
                track_keys: p.track_keys.clone(),
            };
            playlists.push_str(&serde_json::to_string(&rec)?);
            playlists.push('\n');
        }
        let mut queries = String::new();
        for q in self.queries() {
            queries.push_str(&serde_json::to_string(q)?);
            queries.push('\n');
        }
        let paths = vec![dir.join(TRACKS_FILE), dir.join(PLAYLISTS_FILE), dir.join(QUERIES_FILE)];
        for (p, body) in paths.iter().zip([tracks, playlists, queries]) {
            util::write_atomic(p, body.as_bytes())?;
        }
        Ok(paths)
    }
}
