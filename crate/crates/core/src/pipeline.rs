//! Stage functions and the end-to-end run. Stages are pure functions of the
//! config and their inputs; [`run_pipeline`] adds the artifact layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baselines::Baseline;
use crate::config::{RunConfig, Scheme};
use crate::corpus::{generate_synthetic, to_training_pairs, Corpus};
use crate::decoder::Recommender;
use crate::embeddings::{embed_texts, track_text, train_skipgram, EmbeddingTable, Provenance};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_report, run_baseline, run_generative, sweep_homogeneity, sweep_table, EvalReport, MethodRun, SweepRow,
};
use crate::id_registry::IdRegistry;
use crate::lm::{self, Checkpoint};
use crate::semantic_ids::{assign_semantic_ids, learn_dictionary, Dictionary};
use crate::util;

pub const CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Where each artifact lives under one root directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactPaths { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    pub fn embeddings(&self, p: Provenance) -> PathBuf {
        self.embeddings_dir().join(format!("{p}.emb"))
    }

    pub fn semantic_dir(&self, p: Provenance) -> PathBuf {
        self.root.join(format!("semantic-{p}"))
    }

    pub fn dictionary(&self, p: Provenance) -> PathBuf {
        self.semantic_dir(p).join("dictionary.txt")
    }

    pub fn semantic_ids(&self, p: Provenance) -> PathBuf {
        self.semantic_dir(p).join("ids.tsv")
    }

    pub fn scheme_dir(&self, s: Scheme) -> PathBuf {
        self.root.join(s.as_str())
    }

    pub fn registry(&self, s: Scheme) -> PathBuf {
        self.scheme_dir(s).join("registry.tsv")
    }

    pub fn checkpoint(&self, s: Scheme) -> PathBuf {
        self.scheme_dir(s).join("checkpoint.bin")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn report(&self) -> PathBuf {
        self.report_dir().join("report.json")
    }

    pub fn report_table(&self) -> PathBuf {
        self.report_dir().join("report.tsv")
    }
}

/// Fingerprint of the effective config.
pub fn config_fingerprint(cfg: &RunConfig) -> String {
    util::fingerprint([cfg.to_toml()])
}

/// Writes the effective config and `inputs` (name → fingerprint) into `dir`.
pub fn write_provenance(dir: &Path, cfg: &RunConfig, inputs: &BTreeMap<String, String>) -> Result<()> {
    let mut all = inputs.clone();
    all.insert("config".into(), config_fingerprint(cfg));
    util::write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&all)?;
    json.push('\n');
    util::write_atomic(&dir.join(PROVENANCE_FILE), json.as_bytes())?;
    Ok(())
}

/// The unsplit synthetic corpus.
pub fn synthesize(cfg: &RunConfig) -> Result<Corpus> {
    generate_synthetic(&cfg.corpus.synth, cfg.seed)
}

pub fn split(cfg: &RunConfig, corpus: &Corpus) -> Result<Corpus> {
    corpus.split(cfg.corpus.test_fraction, cfg.seed)
}

/// Loads a saved corpus and re-applies the configured split.
pub fn load_split_corpus(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    split(cfg, &Corpus::load_dir(dir)?)
}

/// Track embeddings from train-side data only.
pub fn train_embeddings(cfg: &RunConfig, corpus: &Corpus, provenance: Provenance) -> Result<EmbeddingTable> {
    match provenance {
        Provenance::Cf => {
            let playlists: Vec<_> = corpus.train_playlists().collect();
            train_skipgram(&playlists, &cfg.embeddings.skipgram(cfg.seed))
        }
        Provenance::Text => {
            let queries = corpus.train_queries();
            let mut keys = Vec::new();
            let mut texts = Vec::new();
            for t in corpus.tracks() {
                let text = track_text(&t.track_key, &queries);
                if !text.is_empty() {
                    keys.push(t.track_key.clone());
                    texts.push(text);
                }
            }
            embed_texts(&keys, &texts, cfg.embeddings.text_dim, cfg.seed)
        }
    }
}

pub fn learn_semantic(cfg: &RunConfig, corpus: &Corpus, table: &EmbeddingTable) -> Result<Dictionary> {
    let s = cfg.semantic.dictionary_size(corpus.tracks().len());
    learn_dictionary(table, s, cfg.semantic.c, cfg.semantic.iters, cfg.seed)
}

/// Tab-separated `track_key, id` lines in table order.
pub fn semantic_id_map(table: &EmbeddingTable, dict: &Dictionary) -> Result<String> {
    let assignment = assign_semantic_ids(table, dict)?;
    let mut out = String::new();
    for (k, id) in &assignment.ids {
        out.push_str(&format!("{k}\t{id}\n"));
    }
    Ok(out)
}

/// `semantic` must hold the embedding table and dictionary for semantic
/// schemes and is ignored otherwise.
pub fn build_registry(
    cfg: &RunConfig,
    corpus: &Corpus,
    scheme: Scheme,
    semantic: Option<(&EmbeddingTable, &Dictionary)>,
) -> Result<IdRegistry> {
    let base = cfg.registry.counter_base;
    Ok(match scheme {
        Scheme::Content => IdRegistry::build_content(corpus),
        Scheme::TrackInt => IdRegistry::build_track_int(corpus, base, cfg.seed),
        Scheme::ArtistIntTrackSeq => IdRegistry::build_artist_int_track_seq(corpus, base, cfg.seed),
        Scheme::ArtistIidTrackSeq => {
            IdRegistry::build_artist_iid_track_seq(corpus, cfg.registry.top_k(corpus.artists().len()), base, cfg.seed)?
        }
        Scheme::SemanticCf | Scheme::SemanticText => {
            let (table, dict) = semantic.ok_or_else(|| {
                Error::InvalidInput(format!("strategy `{scheme}` needs an embedding table and a dictionary"))
            })?;
            let want = scheme.provenance().expect("semantic scheme");
            if table.provenance() != want {
                return Err(Error::InvalidInput(format!(
                    "strategy `{scheme}` needs {want} embeddings, got {}",
                    table.provenance()
                )));
            }
            IdRegistry::build_semantic(corpus, table, dict, base, cfg.seed)?
        }
    })
}

/// Fits the tokenizer and trains the model. The target length limit is
/// raised to the longest tokenized id in the registry when needed.
pub fn train_model(cfg: &RunConfig, corpus: &Corpus, registry: &IdRegistry) -> Result<Checkpoint> {
    let pairs = to_training_pairs(&corpus.train_queries(), registry)?;
    let tokenizer = lm::fit_tokenizer(&pairs, registry, cfg.train.base_vocab_size)?;
    let mut mcfg = cfg.model.model_config(cfg.seed);
    let longest = registry.forward().iter().map(|(_, id)| tokenizer.encode(id).len()).max().unwrap_or(1);
    if longest > mcfg.max_target_len {
        log::info!("raising max_target_len from {} to {longest}", mcfg.max_target_len);
        mcfg.max_target_len = longest;
    }
    lm::train(&pairs, &tokenizer, registry, &mcfg, &cfg.train.train_config(cfg.seed))
}

pub fn fit_baselines(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<(String, Baseline)>> {
    let dense = cfg.eval.dense.dense_config(cfg.seed);
    cfg.eval
        .baselines
        .iter()
        .map(|&m| Ok((m.as_str().to_string(), Baseline::fit(m, corpus, &dense)?)))
        .collect()
}

/// A trained generative method ready for evaluation.
pub struct Trained {
    pub scheme: Scheme,
    pub registry: IdRegistry,
    pub checkpoint: Checkpoint,
}

/// Evaluates every generative method and baseline over the test queries.
pub fn evaluate(
    cfg: &RunConfig,
    corpus: &Corpus,
    trained: &[Trained],
    baselines: &[(String, Baseline)],
) -> Result<EvalReport> {
    let queries = corpus.test_queries();
    let k = cfg.eval.k;
    let mut runs: Vec<MethodRun> = Vec::new();
    let mut metadata = BTreeMap::new();
    metadata.insert("seed".to_string(), cfg.seed.to_string());
    metadata.insert("config".to_string(), config_fingerprint(cfg));
    metadata.insert("corpus".to_string(), corpus.identity());
    for t in trained {
        let rec = Recommender::new(&t.checkpoint, &t.registry)?;
        log::info!("evaluating {} on {} queries", t.scheme, queries.len());
        runs.push(run_generative(t.scheme.as_str(), &rec, &queries, k, &cfg.decode)?);
        metadata.insert(format!("registry.{}", t.scheme), t.registry.fingerprint().to_string());
        metadata.insert(format!("checkpoint.{}", t.scheme), checkpoint_fingerprint(&t.checkpoint)?);
    }
    for (name, b) in baselines {
        runs.push(run_baseline(name, b, &queries, k));
    }
    build_report(corpus, &queries, runs, k, metadata)
}

pub fn checkpoint_fingerprint(ck: &Checkpoint) -> Result<String> {
    Ok(util::fingerprint([ck.to_bytes()?]))
}

pub fn sweep(cfg: &RunConfig, corpus: &Corpus, trained: &Trained) -> Result<Vec<SweepRow>> {
    let rec = Recommender::new(&trained.checkpoint, &trained.registry)?;
    sweep_homogeneity(&rec, corpus, &corpus.test_queries(), &cfg.eval.lambdas, cfg.eval.k, &cfg.decode)
}

/// Writes `sweep.json` and `sweep.tsv` into `dir` and returns the table.
pub fn save_sweep(dir: &Path, rows: &[SweepRow], k: usize) -> Result<String> {
    let mut json = serde_json::to_string_pretty(rows)?;
    json.push('\n');
    util::write_atomic(&dir.join("sweep.json"), json.as_bytes())?;
    let table = sweep_table(rows, k);
    util::write_atomic(&dir.join("sweep.tsv"), table.as_bytes())?;
    Ok(table)
}

/// Everything produced by [`run_pipeline`].
pub struct PipelineOutput {
    pub corpus: Corpus,
    pub trained: Vec<Trained>,
    pub report: EvalReport,
}

/// Runs every stage for `schemes` under `root`, overwriting earlier
/// artifacts, and writes one report covering the schemes and baselines.
pub fn run_pipeline(cfg: &RunConfig, schemes: &[Scheme], root: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    if schemes.is_empty() {
        return Err(Error::config("strategy", "at least one strategy is required"));
    }
    let paths = ArtifactPaths::new(root);

    let full = synthesize(cfg)?;
    full.save_dir(&paths.corpus_dir())?;
    let corpus = split(cfg, &full)?;
    let corpus_inputs = BTreeMap::from([("corpus".to_string(), corpus.identity())]);
    write_provenance(&paths.corpus_dir(), cfg, &corpus_inputs)?;

    let mut semantic: BTreeMap<Provenance, (EmbeddingTable, Dictionary)> = BTreeMap::new();
    for p in schemes.iter().filter_map(|s| s.provenance()) {
        if semantic.contains_key(&p) {
            continue;
        }
        log::info!("training {p} embeddings");
        let table = train_embeddings(cfg, &corpus, p)?;
        table.save(&paths.embeddings(p))?;
        let mut inputs = corpus_inputs.clone();
        inputs.insert(format!("embeddings.{p}"), table.fingerprint());
        write_provenance(&paths.embeddings_dir(), cfg, &inputs)?;

        log::info!("learning {p} dictionary");
        let dict = learn_semantic(cfg, &corpus, &table)?;
        dict.save(&paths.dictionary(p))?;
        util::write_atomic(&paths.semantic_ids(p), semantic_id_map(&table, &dict)?.as_bytes())?;
        inputs.insert(format!("dictionary.{p}"), util::fingerprint([dict.to_text()]));
        write_provenance(&paths.semantic_dir(p), cfg, &inputs)?;
        semantic.insert(p, (table, dict));
    }

    let mut trained = Vec::new();
    let mut report_inputs = corpus_inputs.clone();
    for &scheme in schemes {
        if trained.iter().any(|t: &Trained| t.scheme == scheme) {
            continue;
        }
        let sem = scheme.provenance().map(|p| {
            let (t, d) = &semantic[&p];
            (t, d)
        });
        let registry = build_registry(cfg, &corpus, scheme, sem)?;
        registry.save(&paths.registry(scheme))?;
        log::info!("training {scheme}");
        let checkpoint = train_model(cfg, &corpus, &registry)?;
        checkpoint.save(&paths.checkpoint(scheme))?;
        let mut inputs = corpus_inputs.clone();
        if let Some((t, d)) = sem {
            inputs.insert("embeddings".into(), t.fingerprint());
            inputs.insert("dictionary".into(), util::fingerprint([d.to_text()]));
        }
        inputs.insert("registry".into(), registry.fingerprint().to_string());
        inputs.insert("checkpoint".into(), checkpoint_fingerprint(&checkpoint)?);
        write_provenance(&paths.scheme_dir(scheme), cfg, &inputs)?;
        report_inputs.insert(format!("registry.{scheme}"), registry.fingerprint().to_string());
        report_inputs.insert(format!("checkpoint.{scheme}"), inputs["checkpoint"].clone());
        trained.push(Trained {
            scheme,
            registry,
            checkpoint,
        });
    }

    log::info!("fitting baselines");
    let baselines = fit_baselines(cfg, &corpus)?;
    let report = evaluate(cfg, &corpus, &trained, &baselines)?;
    report.save(&paths.report())?;
    util::write_atomic(&paths.report_table(), report.table().as_bytes())?;
    write_provenance(&paths.report_dir(), cfg, &report_inputs)?;
    Ok(PipelineOutput {
        corpus,
        trained,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthConfig;

    pub(crate) fn small_config() -> RunConfig {
        let mut cfg = RunConfig {
            seed: 3,
            ..RunConfig::default()
        };
        cfg.corpus.synth = SynthConfig {
            n_genres: 2,
            artists_per_genre: 3,
            tracks_per_artist: 6,
            n_playlists: 120,
            min_playlist_len: 4,
            max_playlist_len: 6,
            ..SynthConfig::default()
        };
        cfg.corpus.test_fraction = 0.2;
        cfg.embeddings.dim = 8;
        cfg.embeddings.text_dim = 8;
        cfg.semantic.s = Some(8);
        cfg.semantic.iters = 3;
        cfg.model.layers = 1;
        cfg.model.width = 16;
        cfg.model.ff_width = 32;
        cfg.model.heads = 2;
        cfg.train.epochs = 1;
        cfg.decode.groups = 2;
        cfg.eval.dense.dim = 16;
        cfg.eval.dense.epochs = 1;
        cfg
    }

    #[test]
    fn saved_corpus_resplits_identically() {
        let cfg = small_config();
        let full = synthesize(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        full.save_dir(dir.path()).unwrap();
        let a = split(&cfg, &full).unwrap();
        let b = load_split_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(a.identity(), b.identity());
        assert!(!a.test_queries().is_empty());
    }

    #[test]
    fn text_embeddings_skip_tracks_without_queries() {
        let cfg = small_config();
        let corpus = split(&cfg, &synthesize(&cfg).unwrap()).unwrap();
        let table = train_embeddings(&cfg, &corpus, Provenance::Text).unwrap();
        assert_eq!(table.provenance(), Provenance::Text);
        for (k, row) in table.iter() {
            assert!(row.iter().any(|v| *v != 0.0), "{k}");
        }
    }

    #[test]
    fn semantic_registry_needs_matching_embeddings() {
        let cfg = small_config();
        let corpus = split(&cfg, &synthesize(&cfg).unwrap()).unwrap();
        assert!(build_registry(&cfg, &corpus, Scheme::SemanticCf, None).is_err());
        let table = train_embeddings(&cfg, &corpus, Provenance::Text).unwrap();
        let dict = learn_semantic(&cfg, &corpus, &table).unwrap();
        assert!(build_registry(&cfg, &corpus, Scheme::SemanticCf, Some((&table, &dict))).is_err());
        let reg = build_registry(&cfg, &corpus, Scheme::SemanticText, Some((&table, &dict))).unwrap();
        assert_eq!(reg.len(), corpus.tracks().len());
    }

    #[test]
    fn content_ids_widen_the_target_limit() {
        let mut cfg = small_config();
        cfg.model.max_target_len = 2;
        let corpus = split(&cfg, &synthesize(&cfg).unwrap()).unwrap();
        let reg = build_registry(&cfg, &corpus, Scheme::Content, None).unwrap();
        let ck = train_model(&cfg, &corpus, &reg).unwrap();
        assert!(ck.model.config().max_target_len > 2);
    }

    #[test]
    fn pipeline_writes_artifacts_and_is_reproducible() {
        let cfg = small_config();
        let schemes = [Scheme::SemanticCf, Scheme::TrackInt];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let out = run_pipeline(&cfg, &schemes, a.path()).unwrap();
        run_pipeline(&cfg, &schemes, b.path()).unwrap();
        let paths = ArtifactPaths::new(a.path());
        for p in [
            paths.corpus_dir().join(CONFIG_FILE),
            paths.embeddings(Provenance::Cf),
            paths.dictionary(Provenance::Cf),
            paths.semantic_ids(Provenance::Cf),
            paths.registry(Scheme::SemanticCf),
            paths.checkpoint(Scheme::TrackInt),
            paths.scheme_dir(Scheme::TrackInt).join(PROVENANCE_FILE),
            paths.report_table(),
        ] {
            assert!(p.is_file(), "{}", p.display());
        }
        let ra = std::fs::read(paths.report()).unwrap();
        let rb = std::fs::read(ArtifactPaths::new(b.path()).report()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(out.report.methods.len(), 2 + cfg.eval.baselines.len());
        assert_eq!(EvalReport::load(&paths.report()).unwrap(), out.report);
    }
}
