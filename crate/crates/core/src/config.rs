//! Run configuration: one TOML document with a section per stage. Every
//! field has a default and unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineMethod, DenseConfig};
use crate::corpus::SynthConfig;
use crate::decoder::DecodeConfig;
use crate::embeddings::{Provenance, SkipgramConfig};
use crate::error::{Error, Result};
use crate::id_registry::{Strategy, DEFAULT_COUNTER_BASE};
use crate::lm::tokenizer::DEFAULT_BASE_VOCAB;
use crate::lm::{ModelConfig, TrainConfig};

/// An ID strategy plus, for semantic IDs, the embedding source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Content,
    TrackInt,
    ArtistIntTrackSeq,
    ArtistIidTrackSeq,
    SemanticCf,
    SemanticText,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Content,
        Scheme::TrackInt,
        Scheme::ArtistIntTrackSeq,
        Scheme::ArtistIidTrackSeq,
        Scheme::SemanticCf,
        Scheme::SemanticText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Content => "content",
            Scheme::TrackInt => "track-int",
            Scheme::ArtistIntTrackSeq => "artist-int-track-seq",
            Scheme::ArtistIidTrackSeq => "artist-iid-track-seq",
            Scheme::SemanticCf => "semantic-cf",
            Scheme::SemanticText => "semantic-text",
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            Scheme::Content => Strategy::Content,
            Scheme::TrackInt => Strategy::TrackInt,
            Scheme::ArtistIntTrackSeq => Strategy::ArtistIntTrackSeq,
            Scheme::ArtistIidTrackSeq => Strategy::ArtistIidTrackSeq,
            Scheme::SemanticCf | Scheme::SemanticText => Strategy::Semantic,
        }
    }

    /// Embedding source for semantic schemes.
    pub fn provenance(self) -> Option<Provenance> {
        match self {
            Scheme::SemanticCf => Some(Provenance::Cf),
            Scheme::SemanticText => Some(Provenance::Text),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| {
            let tags: Vec<&str> = Scheme::ALL.iter().map(|x| x.as_str()).collect();
            Error::config("strategy", format!("unknown strategy `{s}`, expected one of {}", tags.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub test_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            test_fraction: 0.1,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsSection {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub subsample: f64,
    /// Dimension of the text-provenance table.
    pub text_dim: usize,
}

impl Default for EmbeddingsSection {
    fn default() -> Self {
        let s = SkipgramConfig::default();
        EmbeddingsSection {
            dim: s.dim,
            window: s.window,
            negatives: s.negatives,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            min_learning_rate: s.min_learning_rate,
            subsample: s.subsample,
            text_dim: 64,
        }
    }
}

impl EmbeddingsSection {
    pub fn skipgram(&self, seed: u64) -> SkipgramConfig {
        SkipgramConfig {
            dim: self.dim,
            window: self.window,
            negatives: self.negatives,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            min_learning_rate: self.min_learning_rate,
            subsample: self.subsample,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticSection {
    /// Dictionary size; `max(64, sqrt(tracks))` when absent.
    pub s: Option<usize>,
    pub c: usize,
    pub iters: usize,
}

impl Default for SemanticSection {
    fn default() -> Self {
        SemanticSection { s: None, c: 3, iters: 30 }
    }
}

impl SemanticSection {
    pub fn dictionary_size(&self, tracks: usize) -> usize {
        self.s.unwrap_or_else(|| 64.max((tracks as f64).sqrt().ceil() as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrySection {
    pub counter_base: u64,
    /// Artists given an atomic token; `min(50000, artists)` when absent.
    pub top_k_artists: Option<usize>,
}

impl Default for RegistrySection {
    fn default() -> Self {
        RegistrySection {
            counter_base: DEFAULT_COUNTER_BASE,
            top_k_artists: None,
        }
    }
}

impl RegistrySection {
    pub fn top_k(&self, artists: usize) -> usize {
        self.top_k_artists.unwrap_or_else(|| 50_000.min(artists))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Tokenizer budget: base alphabet plus learned merges.
    pub base_vocab_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            grad_clip: t.grad_clip,
            base_vocab_size: DEFAULT_BASE_VOCAB,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            grad_clip: self.grad_clip,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseSection {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scale: f64,
}

impl Default for DenseSection {
    fn default() -> Self {
        let d = DenseConfig::default();
        DenseSection {
            dim: d.dim,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            scale: d.scale,
        }
    }
}

impl DenseSection {
    pub fn dense_config(&self, seed: u64) -> DenseConfig {
        DenseConfig {
            dim: self.dim,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            scale: self.scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    /// Baselines evaluated next to the generative model.
    pub baselines: Vec<BaselineMethod>,
    /// Penalty values for the homogeneity sweep.
    pub lambdas: Vec<f64>,
    pub dense: DenseSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: crate::evaluation::DEFAULT_K,
            baselines: BaselineMethod::ALL.to_vec(),
            lambdas: vec![0.0, 0.25, 0.5, 1.0],
            dense: DenseSection::default(),
        }
    }
}

/// Model parameters without the seed, which comes from [`RunConfig::seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub max_input_len: usize,
    /// Raised to the longest tokenized id when that is longer.
    pub max_target_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            layers: m.layers,
            heads: m.heads,
            width: m.width,
            ff_width: m.ff_width,
            dropout: m.dropout,
            max_input_len: m.max_input_len,
            max_target_len: m.max_target_len,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            width: self.width,
            ff_width: self.ff_width,
            dropout: self.dropout,
            max_input_len: self.max_input_len,
            max_target_len: self.max_target_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Shared by every stage; each stage draws from its own labeled stream.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub embeddings: EmbeddingsSection,
    pub semantic: SemanticSection,
    pub registry: RegistrySection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split('`').next())
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, msg.lines().next().unwrap_or_default().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Effective configuration with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if !(c.test_fraction > 0.0 && c.test_fraction < 0.5) {
            return Err(Error::config("corpus.test_fraction", "must be in (0, 0.5)"));
        }
        c.synth.validate().map_err(|e| prefixed(e, "corpus.synth"))?;
        self.embeddings.skipgram(self.seed).validate()?;
        if self.embeddings.text_dim < 8 {
            return Err(Error::config("embeddings.text_dim", "must be >= 8"));
        }
        let s = &self.semantic;
        if s.c == 0 {
            return Err(Error::config("semantic.c", "must be >= 1"));
        }
        if s.s.is_some_and(|v| v < s.c) {
            return Err(Error::config("semantic.s", "must be >= semantic.c"));
        }
        if s.iters == 0 {
            return Err(Error::config("semantic.iters", "must be >= 1"));
        }
        if self.registry.counter_base < 1 {
            return Err(Error::config("registry.counter_base", "must be >= 1"));
        }
        if self.registry.top_k_artists == Some(0) {
            return Err(Error::config("registry.top_k_artists", "must be >= 1"));
        }
        self.model.model_config(self.seed).validate()?;
        self.train.train_config(self.seed).validate().map_err(|e| prefixed(e, "train"))?;
        if self.train.base_vocab_size < 16 {
            return Err(Error::config("train.base_vocab_size", "must be >= 16"));
        }
        self.decode.validate()?;
        let e = &self.eval;
        if e.k == 0 {
            return Err(Error::config("eval.k", "must be >= 1"));
        }
        if e.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("eval.lambdas", "values must be finite and >= 0"));
        }
        e.dense.dense_config(self.seed).validate().map_err(|e| prefixed(e, "eval.dense"))?;
        Ok(())
    }
}

fn prefixed(e: Error, section: &str) -> Error {
    match e {
        Error::Config { field, reason } if !field.starts_with(section) => {
            let field = field.split('.').next_back().unwrap_or(&field).to_string();
            Error::Config {
                field: format!("{section}.{field}"),
                reason,
            }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_document_keeps_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[model]\nwidth = 64\n[corpus.synth]\nn_genres = 4\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.width, 64);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.corpus.synth.n_genres, 4);
        assert_eq!(cfg.corpus.synth.n_playlists, 5000);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[model]\nwidht = 64\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "widht"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let cases = [
            ("[corpus]\ntest_fraction = 0.7\n", "corpus.test_fraction"),
            ("[corpus.synth]\nn_genres = 1\n", "corpus.synth.n_genres"),
            ("[model]\nwidth = 30\nheads = 4\n", "model.width"),
            ("[semantic]\nc = 0\n", "semantic.c"),
            ("[eval]\nlambdas = [-1.0]\n", "eval.lambdas"),
            ("[registry]\ntop_k_artists = 0\n", "registry.top_k_artists"),
        ];
        for (doc, want) in cases {
            match RunConfig::from_toml(doc).unwrap_err() {
                Error::Config { field, .. } => assert_eq!(field, want, "{doc}"),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn scheme_tags_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("semantic".parse::<Scheme>().is_err());
        assert_eq!(Scheme::SemanticText.strategy(), Strategy::Semantic);
    }

    #[test]
    fn derived_defaults() {
        let s = SemanticSection::default();
        assert_eq!(s.dictionary_size(2000), 64);
        assert_eq!(s.dictionary_size(10_000), 100);
        assert_eq!(RegistrySection::default().top_k(200), 200);
    }
}
