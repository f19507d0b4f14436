//! Planted-genre synthetic corpus.
//!
//! Each genre owns a keyword pool and a disjoint set of artists. A playlist
//! picks a dominant genre and a mood, titles itself from those pools, and
//! draws tracks with Zipf-like popularity weights boosted for tracks sharing
//! the playlist mood. A `cross_genre_noise` fraction of slots is drawn from
//! other genres.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Artist, Corpus, LabeledQuery, Playlist, Track};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_genres: usize,
    pub artists_per_genre: usize,
    /// Mean tracks per artist; actual counts are uniform in `[mean/2, 3*mean/2]`.
    pub tracks_per_artist: usize,
    pub n_playlists: usize,
    pub min_playlist_len: usize,
    pub max_playlist_len: usize,
    pub cross_genre_noise: f64,
    pub zipf_exponent: f64,
    /// Sampling weight multiplier for tracks whose mood matches the playlist.
    pub mood_boost: f64,
    /// Probability that a track takes its artist's mood instead of a
    /// uniformly drawn one.
    pub artist_mood_coherence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_genres: 8,
            artists_per_genre: 25,
            tracks_per_artist: 10,
            n_playlists: 5000,
            min_playlist_len: 10,
            max_playlist_len: 16,
            cross_genre_noise: 0.1,
            zipf_exponent: 1.0,
            mood_boost: 4.0,
            artist_mood_coherence: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_genres < 2 {
            return Err(Error::config("n_genres", "must be >= 2"));
        }
        if self.artists_per_genre < 2 {
            return Err(Error::config("artists_per_genre", "must be >= 2"));
        }
        if self.tracks_per_artist < 2 {
            return Err(Error::config("tracks_per_artist", "must be >= 2"));
        }
        if self.n_playlists < 100 {
            return Err(Error::config("n_playlists", "must be >= 100"));
        }
        if !(0.0..1.0).contains(&self.cross_genre_noise) {
            return Err(Error::config("cross_genre_noise", "must be in [0, 1)"));
        }
        if self.min_playlist_len < 1 || self.max_playlist_len < self.min_playlist_len {
            return Err(Error::config("min_playlist_len", "need 1 <= min_playlist_len <= max_playlist_len"));
        }
        if self.max_playlist_len > self.artists_per_genre * (self.tracks_per_artist / 2).max(1) {
            return Err(Error::config("max_playlist_len", "larger than the smallest possible genre"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config("zipf_exponent", "must be finite and >= 0"));
        }
        if !(self.mood_boost >= 1.0 && self.mood_boost.is_finite()) {
            return Err(Error::config("mood_boost", "must be finite and >= 1"));
        }
        if !(0.0..=1.0).contains(&self.artist_mood_coherence) {
            return Err(Error::config("artist_mood_coherence", "must be in [0, 1]"));
        }
        Ok(())
    }
}

const GENRE_KEYWORDS: &[&[&str]] = &[
    &["rock", "guitar", "anthems", "riffs", "grunge", "garage"],
    &["techno", "house", "synth", "rave", "edm", "club"],
    &["jazz", "swing", "bebop", "sax", "lounge", "bossa"],
    &["rap", "hiphop", "bars", "flow", "trap", "boombap"],
    &["classical", "piano", "symphony", "strings", "baroque", "orchestral"],
    &["country", "banjo", "honky", "rodeo", "western", "twang"],
    &["metal", "thrash", "doom", "shred", "heavy", "headbang"],
    &["reggae", "dub", "roots", "island", "ska", "dancehall"],
    &["folk", "acoustic", "campfire", "ballads", "fiddle", "americana"],
    &["soul", "funk", "groove", "motown", "disco", "rnb"],
    &["latin", "salsa", "reggaeton", "cumbia", "bachata", "tango"],
    &["kpop", "idol", "bubblegum", "sugar", "sparkle", "popstar"],
];

const MOODS: &[&str] = &[
    "chill", "happy", "sad", "dark", "dreamy", "energetic", "mellow", "angry", "romantic", "nostalgic",
];

const ACTIVITIES: &[&str] = &[
    "workout", "study", "driving", "party", "sleep", "cooking", "focus", "running", "rainy days", "road trips",
    "dinner", "morning coffee",
];

const TEMPLATES: &[&str] = &[
    "{mood} {kw1} {kw2} for {activity}",
    "{kw1} {kw2} {activity} {mood} vibes",
    "{activity} with {mood} {kw1} and {kw2}",
    "{mood} {activity} {kw1} {kw2} mix",
];

const TITLE_WORDS: &[&str] = &[
    "Love", "Night", "Fire", "Heart", "City", "Dream", "Rain", "Gold", "River", "Moon", "Shadow", "Light", "Home",
    "Road", "Summer", "Blue", "Wild", "Stone", "Ocean", "Dance", "Ghost", "Sky", "Echo", "Glass", "Storm", "Silver",
    "Paper", "Velvet", "Neon", "Garden", "Winter", "Honey", "Thunder", "Angel", "Diamond", "Electric", "Midnight",
    "Golden", "Broken", "Falling", "Rising", "Lonely", "Sweet", "Cold", "Hot", "Lost", "Young", "Free", "Under",
    "Over", "Back", "Again", "Tonight", "Forever", "Never", "Always", "My", "Your", "The", "In", "Of", "On",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "ven", "mi", "ra", "zu", "tor", "el", "sa", "no", "vi", "dre", "mar", "quin", "bel", "ash", "ri",
    "tal", "go", "fen", "ly", "na", "or", "pe", "sol", "ju", "kai", "ren", "vo", "lin",
];

fn genre_keywords(g: usize) -> Vec<String> {
    match GENRE_KEYWORDS.get(g) {
        Some(kw) => kw.iter().map(|s| s.to_string()).collect(),
        None => (0..6).map(|i| format!("{}{}", SYLLABLES[(g * 7 + i) % SYLLABLES.len()], SYLLABLES[(g + i * 3) % SYLLABLES.len()]) + &g.to_string()).collect(),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    capitalize(&w)
}

/// Genre index planted in a synthetic track or artist key (`gNN-...`).
pub fn planted_genre(key: &str) -> Option<usize> {
    key.strip_prefix('g')?.split('-').next()?.parse().ok()
}

struct GenrePool {
    tracks: Vec<usize>,
    base_weight: Vec<f64>,
}

/// Generates an unsplit planted-genre corpus. Same `(cfg, seed)` gives an
/// identical corpus.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = util::rng(seed, "synth");

    let mut artists = Vec::new();
    let mut tracks: Vec<Track> = Vec::new();
    let mut track_mood: Vec<usize> = Vec::new();
    let mut pools: Vec<GenrePool> = Vec::new();
    let mut names = HashSet::new();
    for g in 0..cfg.n_genres {
        let mut pool = GenrePool {
            tracks: Vec::new(),
            base_weight: Vec::new(),
        };
        for a in 0..cfg.artists_per_genre {
            let artist_key = format!("g{g:02}-a{a:03}");
            let name = loop {
                let n = format!("{} {}", pseudo_word(&mut rng), pseudo_word(&mut rng));
                if names.insert(n.clone()) {
                    break n;
                }
            };
            artists.push(Artist {
                artist_key: artist_key.clone(),
                name,
            });
            let artist_mood = rng.gen_range(0..MOODS.len());
            let lo = (cfg.tracks_per_artist / 2).max(1);
            let hi = cfg.tracks_per_artist + cfg.tracks_per_artist / 2;
            let n_tracks = rng.gen_range(lo..=hi);
            let mut titles = HashSet::new();
            for t in 0..n_tracks {
                let title = loop {
                    let n_words = rng.gen_range(3..=6);
                    let words: Vec<&str> = (0..n_words).map(|_| *TITLE_WORDS.choose(&mut rng).unwrap()).collect();
                    let title = words.join(" ");
                    if titles.insert(title.clone()) {
                        break title;
                    }
                };
                pool.tracks.push(tracks.len());
                track_mood.push(if rng.gen_bool(cfg.artist_mood_coherence) {
                    artist_mood
                } else {
                    rng.gen_range(0..MOODS.len())
                });
                tracks.push(Track {
                    track_key: format!("{artist_key}-t{t:02}"),
                    artist_key: artist_key.clone(),
                    title,
                    popularity: 0,
                });
            }
        }
        // Zipf weights over a random popularity ranking within the genre.
        let mut ranks: Vec<usize> = (0..pool.tracks.len()).collect();
        ranks.shuffle(&mut rng);
        pool.base_weight = ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)).collect();
        pools.push(pool);
    }

    let mut playlists = Vec::with_capacity(cfg.n_playlists);
    let mut queries = Vec::with_capacity(cfg.n_playlists);
    for p in 0..cfg.n_playlists {
        let genre = rng.gen_range(0..cfg.n_genres);
        let mood = rng.gen_range(0..MOODS.len());
        let activity = ACTIVITIES[rng.gen_range(0..ACTIVITIES.len())];
        let kws = genre_keywords(genre);
        let picked: Vec<&String> = kws.choose_multiple(&mut rng, 2).collect();
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let title = template
            .replace("{mood}", MOODS[mood])
            .replace("{kw1}", picked[0])
            .replace("{kw2}", picked[1])
            .replace("{activity}", activity);

        let dists: Vec<WeightedIndex<f64>> = (0..cfg.n_genres)
            .map(|g| {
                let pool = &pools[g];
                let w = pool
                    .tracks
                    .iter()
                    .zip(&pool.base_weight)
                    .map(|(&t, &w)| if track_mood[t] == mood { w * cfg.mood_boost } else { w });
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect();

        let len = rng.gen_range(cfg.min_playlist_len..=cfg.max_playlist_len);
        let mut chosen: Vec<usize> = Vec::with_capacity(len);
        let mut attempts = 0;
        while chosen.len() < len && attempts < len * 100 {
            attempts += 1;
            let g = if cfg.cross_genre_noise > 0.0 && rng.gen_bool(cfg.cross_genre_noise) {
                let other = rng.gen_range(0..cfg.n_genres - 1);
                if other >= genre {
                    other + 1
                } else {
                    other
                }
            } else {
                genre
            };
            let t = pools[g].tracks[dists[g].sample(&mut rng)];
            if !chosen.contains(&t) {
                chosen.push(t);
            }
        }
        let track_keys: Vec<String> = chosen.iter().map(|&t| tracks[t].track_key.clone()).collect();
        let playlist_key = format!("pl{p:05}");
        queries.push(LabeledQuery {
            utterances: vec![title.clone()],
            relevant_track_keys: track_keys.clone(),
            playlist_key: Some(playlist_key.clone()),
        });
        playlists.push(Playlist {
            playlist_key,
            title,
            track_keys,
        });
    }

    Corpus::from_parts(artists, tracks, playlists, queries)
}
