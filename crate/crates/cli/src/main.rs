use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use trackgen::baselines::{Baseline, BaselineMethod};
use trackgen::config::{RunConfig, Scheme};
use trackgen::corpus::Corpus;
use trackgen::decoder::Recommender;
use trackgen::embeddings::{EmbeddingTable, Provenance};
use trackgen::evaluation::{build_report, run_baseline};
use trackgen::lm::Checkpoint;
use trackgen::pipeline::{self, ArtifactPaths, Trained};
use trackgen::semantic_ids::Dictionary;
use trackgen::{util, IdRegistry};

const DATA_ENV: &str = "T2T_DATA_DIR";

#[derive(Parser)]
#[command(name = "trackgen", version, about = "Generative track retrieval from text prompts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root; defaults to $T2T_DATA_DIR, then ./data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or check a corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train track embeddings.
    #[command(subcommand)]
    Embed(EmbedCommand),
    /// Learn the semantic-id dictionary and id map.
    #[command(subcommand)]
    Semid(SemidCommand),
    /// Build an id registry.
    #[command(subcommand)]
    Registry(RegistryCommand),
    /// Train the seq2seq model for one strategy.
    Train(TrainArgs),
    /// Recommend tracks for prompts read from a file or stdin.
    Query(QueryArgs),
    /// Evaluate trained strategies and the configured baselines.
    Eval(EvalArgs),
    /// Evaluate one baseline.
    Baseline(BaselineArgs),
    /// Evaluate one strategy over a range of homogeneity penalties.
    Sweep(SweepArgs),
    /// Run every stage for the given strategies.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Validate {
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum EmbedCommand {
    Train {
        #[arg(long, default_value = "cf")]
        provenance: Provenance,
    },
}

#[derive(Subcommand)]
enum SemidCommand {
    Learn {
        #[arg(long, default_value = "cf")]
        provenance: Provenance,
    },
}

#[derive(Subcommand)]
enum RegistryCommand {
    Build {
        #[arg(long)]
        strategy: Scheme,
        /// Number of artists with an atomic token (artist-iid-track-seq).
        #[arg(long)]
        top_k: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    strategy: Scheme,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    strategy: Scheme,
    /// One prompt per line; stdin when absent.
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "strategy", required = true)]
    strategies: Vec<Scheme>,
    #[arg(long)]
    k: Option<usize>,
    /// Output directory; defaults to <data>/report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    method: BaselineMethod,
    #[arg(long)]
    k: Option<usize>,
    /// Report path; a `.tsv` table is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    strategy: Scheme,
    /// Comma-separated penalty values.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    k: Option<usize>,
    /// Output directory; defaults to <data>/<strategy>/sweep.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Repeatable; `all` selects every strategy.
    #[arg(long = "strategy", required = true)]
    strategies: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Artifact root for this run; defaults to the data directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors caused by bad input rather than by the run itself.
fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<trackgen::Error>(),
            Some(trackgen::Error::Config { .. } | trackgen::Error::Parse { .. } | trackgen::Error::Integrity { .. })
        )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    paths: ArtifactPaths,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        let root = g
            .data
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"));
        Ok(Ctx {
            cfg,
            paths: ArtifactPaths::new(root),
        })
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        Ok(())
    }

    fn corpus(&self) -> Result<Corpus> {
        let dir = self.paths.corpus_dir();
        pipeline::load_split_corpus(&self.cfg, &dir).with_context(|| format!("loading corpus from {}", dir.display()))
    }

    fn embeddings(&self, p: Provenance) -> Result<EmbeddingTable> {
        let path = self.paths.embeddings(p);
        EmbeddingTable::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn dictionary(&self, p: Provenance) -> Result<Dictionary> {
        let path = self.paths.dictionary(p);
        Dictionary::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn registry(&self, s: Scheme, corpus: &Corpus) -> Result<IdRegistry> {
        let path = self.paths.registry(s);
        IdRegistry::load(&path, corpus).with_context(|| format!("loading {}", path.display()))
    }

    fn trained(&self, s: Scheme, corpus: &Corpus) -> Result<Trained> {
        let registry = self.registry(s, corpus)?;
        let path = self.paths.checkpoint(s);
        let checkpoint = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(Trained {
            scheme: s,
            registry,
            checkpoint,
        })
    }

    fn provenance(&self, dir: &Path, inputs: BTreeMap<String, String>) -> Result<()> {
        pipeline::write_provenance(dir, &self.cfg, &inputs)?;
        Ok(())
    }
}

fn corpus_inputs(corpus: &Corpus) -> BTreeMap<String, String> {
    BTreeMap::from([("corpus".to_string(), corpus.identity())])
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Corpus(CorpusCommand::Synth { out }) => {
            ctx.validate()?;
            let dir = out.unwrap_or_else(|| ctx.paths.corpus_dir());
            let full = pipeline::synthesize(&ctx.cfg)?;
            full.save_dir(&dir)?;
            let corpus = pipeline::split(&ctx.cfg, &full)?;
            ctx.provenance(&dir, corpus_inputs(&corpus))?;
            println!(
                "{} tracks, {} playlists, {} queries ({} test) -> {}",
                full.tracks().len(),
                full.playlists().len(),
                full.queries().len(),
                corpus.test_queries().len(),
                dir.display()
            );
        }
        Command::Corpus(CorpusCommand::Validate { dir }) => {
            let c = Corpus::load_dir(&dir)?;
            println!(
                "ok: {} artists, {} tracks, {} playlists, {} queries",
                c.artists().len(),
                c.tracks().len(),
                c.playlists().len(),
                c.queries().len()
            );
        }
        Command::Embed(EmbedCommand::Train { provenance }) => {
            ctx.validate()?;
            let corpus = ctx.corpus()?;
            let table = pipeline::train_embeddings(&ctx.cfg, &corpus, provenance)?;
            let path = ctx.paths.embeddings(provenance);
            table.save(&path)?;
            let mut inputs = corpus_inputs(&corpus);
            inputs.insert(format!("embeddings.{provenance}"), table.fingerprint());
            ctx.provenance(&ctx.paths.embeddings_dir(), inputs)?;
            println!("{} rows x {} -> {}", table.len(), table.dim(), path.display());
        }
        Command::Semid(SemidCommand::Learn { provenance }) => {
            ctx.validate()?;
            let corpus = ctx.corpus()?;
            let table = ctx.embeddings(provenance)?;
            let dict = pipeline::learn_semantic(&ctx.cfg, &corpus, &table)?;
            dict.save(&ctx.paths.dictionary(provenance))?;
            util::write_atomic(&ctx.paths.semantic_ids(provenance), pipeline::semantic_id_map(&table, &dict)?.as_bytes())?;
            let mut inputs = corpus_inputs(&corpus);
            inputs.insert("embeddings".into(), table.fingerprint());
            inputs.insert("dictionary".into(), util::fingerprint([dict.to_text()]));
            ctx.provenance(&ctx.paths.semantic_dir(provenance), inputs)?;
            println!(
                "s={} c={} error={:.6} -> {}",
                dict.s(),
                dict.c(),
                dict.final_error(),
                ctx.paths.semantic_dir(provenance).display()
            );
        }
        Command::Registry(RegistryCommand::Build { strategy, top_k }) => {
            if top_k.is_some() {
                ctx.cfg.registry.top_k_artists = top_k;
            }
            ctx.validate()?;
            let corpus = ctx.corpus()?;
            let semantic = match strategy.provenance() {
                Some(p) => Some((ctx.embeddings(p)?, ctx.dictionary(p)?)),
                None => None,
            };
            let reg = pipeline::build_registry(&ctx.cfg, &corpus, strategy, semantic.as_ref().map(|(t, d)| (t, d)))?;
            reg.save(&ctx.paths.registry(strategy))?;
            let mut inputs = corpus_inputs(&corpus);
            inputs.insert("registry".into(), reg.fingerprint().to_string());
            ctx.provenance(&ctx.paths.scheme_dir(strategy), inputs)?;
            println!(
                "{} tracks, {} distinct ids, extra_vocab {} -> {}",
                reg.len(),
                reg.distinct_ids().len(),
                reg.extra_vocab().len(),
                ctx.paths.registry(strategy).display()
            );
        }
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                ctx.cfg.train.epochs = v;
            }
            if let Some(v) = a.lr {
                ctx.cfg.train.learning_rate = v;
            }
            if let Some(v) = a.batch_size {
                ctx.cfg.train.batch_size = v;
            }
            ctx.validate()?;
            let corpus = ctx.corpus()?;
            let reg = ctx.registry(a.strategy, &corpus)?;
            let ck = pipeline::train_model(&ctx.cfg, &corpus, &reg)?;
            let path = ctx.paths.checkpoint(a.strategy);
            ck.save(&path)?;
            let mut inputs = corpus_inputs(&corpus);
            inputs.insert("registry".into(), reg.fingerprint().to_string());
            inputs.insert("checkpoint".into(), pipeline::checkpoint_fingerprint(&ck)?);
            ctx.provenance(&ctx.paths.scheme_dir(a.strategy), inputs)?;
            let last = ck.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!("final loss {last:.4} -> {}", path.display());
        }
        Command::Query(a) => {
            if let Some(l) = a.lambda {
                ctx.cfg.decode.diversity_penalty = l;
            }
            ctx.validate()?;
            let k = a.k.unwrap_or(ctx.cfg.eval.k);
            let corpus = ctx.corpus()?;
            let t = ctx.trained(a.strategy, &corpus)?;
            let rec = Recommender::new(&t.checkpoint, &t.registry)?;
            let input: Box<dyn BufRead> = match &a.file {
                Some(p) => Box::new(io::BufReader::new(
                    std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
                )),
                None => Box::new(io::stdin().lock()),
            };
            let mut out = io::stdout().lock();
            for line in input.lines() {
                let line = line?;
                let prompt = line.trim();
                if prompt.is_empty() {
                    continue;
                }
                let r = rec.recommend(prompt, k, &ctx.cfg.decode)?;
                writeln!(out, "# {prompt}")?;
                for (i, (key, score)) in r.ranked.items.iter().enumerate() {
                    let track = corpus.track(key).expect("registry tracks exist");
                    let artist = corpus.artist_of(key).map(|a| a.name.as_str()).unwrap_or("");
                    writeln!(out, "{}\t{key}\t{artist}\t{}\t{score:.6}", i + 1, track.title)?;
                }
                out.flush()?;
            }
        }
        Command::Eval(a) => {
            if let Some(k) = a.k {
                ctx.cfg.eval.k = k;
            }
            ctx.validate()?;
            let corpus = ctx.corpus()?;
            let mut trained = Vec::new();
            for s in dedup(a.strategies) {
                trained.push(ctx.trained(s, &corpus)?);
            }
            let baselines = pipeline::fit_baselines(&ctx.cfg, &corpus)?;
            let report = pipeline::evaluate(&ctx.cfg, &corpus, &trained, &baselines)?;
            let dir = a.out.unwrap_or_else(|| ctx.paths.report_dir());
            report.save(&dir.join("report.json"))?;
            util::write_atomic(&dir.join("report.tsv"), report.table().as_bytes())?;
            ctx.provenance(&dir, report.metadata.clone())?;
            print!("{}", report.table());
        }
        Command::Baseline(a) => {
            if let Some(k) = a.k {
                ctx.cfg.eval.k = k;
            }
            ctx.validate()?;
            let corpus = ctx.corpus()?;
            let queries = corpus.test_queries();
            let b = Baseline::fit(a.method, &corpus, &ctx.cfg.eval.dense.dense_config(ctx.cfg.seed))?;
            let run = run_baseline(a.method.as_str(), &b, &queries, ctx.cfg.eval.k);
            let mut meta = corpus_inputs(&corpus);
            meta.insert("seed".into(), ctx.cfg.seed.to_string());
            meta.insert("config".into(), pipeline::config_fingerprint(&ctx.cfg));
            let report = build_report(&corpus, &queries, vec![run], ctx.cfg.eval.k, meta.clone())?;
            report.save(&a.out)?;
            util::write_atomic(&a.out.with_extension("tsv"), report.table().as_bytes())?;
            if let Some(dir) = a.out.parent() {
                ctx.provenance(dir, meta)?;
            }
            print!("{}", report.table());
        }
        Command::Sweep(a) => {
            if let Some(l) = a.lambdas {
                ctx.cfg.eval.lambdas = l;
            }
            if let Some(k) = a.k {
                ctx.cfg.eval.k = k;
            }
            ctx.validate()?;
            let corpus = ctx.corpus()?;
            let t = ctx.trained(a.strategy, &corpus)?;
            let rows = pipeline::sweep(&ctx.cfg, &corpus, &t)?;
            let dir = a.out.unwrap_or_else(|| ctx.paths.scheme_dir(a.strategy).join("sweep"));
            let table = pipeline::save_sweep(&dir, &rows, ctx.cfg.eval.k)?;
            let mut inputs = corpus_inputs(&corpus);
            inputs.insert("registry".into(), t.registry.fingerprint().to_string());
            inputs.insert("checkpoint".into(), pipeline::checkpoint_fingerprint(&t.checkpoint)?);
            ctx.provenance(&dir, inputs)?;
            print!("{table}");
        }
        Command::Pipeline(a) => {
            if let Some(e) = a.epochs {
                ctx.cfg.train.epochs = e;
            }
            ctx.validate()?;
            let mut schemes = Vec::new();
            for s in &a.strategies {
                if s == "all" {
                    schemes.extend(Scheme::ALL);
                } else {
                    schemes.push(s.parse::<Scheme>()?);
                }
            }
            let root = a.out.unwrap_or_else(|| ctx.paths.root.clone());
            let out = pipeline::run_pipeline(&ctx.cfg, &dedup(schemes), &root)?;
            print!("{}", out.report.table());
        }
    }
    Ok(())
}

fn dedup(mut v: Vec<Scheme>) -> Vec<Scheme> {
    let mut seen = Vec::new();
    v.retain(|s| {
        let fresh = !seen.contains(s);
        seen.push(*s);
        fresh
    });
    v
}
