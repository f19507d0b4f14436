//! Hits@k, artist entropy, paired significance tests and reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::baselines::Baseline;
use crate::corpus::{Corpus, LabeledQuery};
use crate::decoder::{DecodeConfig, RankedList, Recommender};
use crate::error::{Error, Result};
use crate::util;

pub const DEFAULT_K: usize = 10;

/// `|top-k ∩ relevant| / min(k, |relevant|)`.
pub fn hits_at_k(ranked: &RankedList, relevant: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let rel: HashSet<&str> = relevant.iter().map(String::as_str).collect();
    if rel.is_empty() {
        return Err(Error::InvalidInput("relevant set is empty".into()));
    }
    let hits = ranked.keys().take(k).filter(|t| rel.contains(t)).count();
    Ok(hits as f64 / k.min(rel.len()) as f64)
}

/// Shannon entropy in bits of a frequency table.
pub fn entropy_bits<I: IntoIterator<Item = u64>>(counts: I) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts.iter().map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum::<f64>().max(0.0)
}

fn artist_counts<'a>(lists: impl IntoIterator<Item = &'a RankedList>, corpus: &Corpus) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for l in lists {
        for key in l.keys() {
            let artist = corpus.track(key).map_or_else(|| key.to_string(), |t| t.artist_key.clone());
            *counts.entry(artist).or_insert(0) += 1;
        }
    }
    counts
}

/// Entropy of the artists of all predicted tracks pooled across queries.
pub fn artist_entropy(lists: &[RankedList], corpus: &Corpus) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::InvalidInput("no ranked lists".into()));
    }
    Ok(entropy_bits(artist_counts(lists, corpus).into_values()))
}

/// Mean of per-list artist entropies.
pub fn artist_entropy_per_query(lists: &[RankedList], corpus: &Corpus) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::InvalidInput("no ranked lists".into()));
    }
    let total: f64 = lists.iter().map(|l| entropy_bits(artist_counts([l], corpus).into_values())).sum();
    Ok(total / lists.len() as f64)
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Paired two-sided t-test on per-query scores, Bonferroni-adjusted for
/// `m` comparisons.
pub fn paired_ttest_bonferroni(a: &[f64], b: &[f64], m: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("paired t-test needs at least 2 pairs".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("comparison count must be >= 1".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let p = if var <= 0.0 {
        if mean == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        t_two_sided_p(mean / (var / n).sqrt(), n - 1.0)
    };
    Ok((p * m as f64).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub hits_at_k: f64,
    pub per_query: Vec<f64>,
    pub artist_entropy: f64,
    pub artist_entropy_per_query: f64,
    /// Mean id tokens per generated hypothesis (generative methods only).
    pub mean_decode_steps: Option<f64>,
    /// Generated ids that resolved to no track (generative methods only).
    pub unresolved: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub adjusted_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub queries: usize,
    pub methods: Vec<MethodResult>,
    pub significance: Vec<Comparison>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(util::write_atomic(path, self.to_json()?.as_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Tab-separated `method, hits@k, entropy` rows with a header.
    pub fn table(&self) -> String {
        let mut s = format!("method\thits@{}\tartist_entropy\n", self.k);
        for m in &self.methods {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\n", m.method, m.hits_at_k, m.artist_entropy));
        }
        s
    }
}

/// Ranked lists produced by one method over the test queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: String,
    pub ranked: Vec<RankedList>,
    pub mean_decode_steps: Option<f64>,
    pub unresolved: Option<usize>,
}

/// Runs `recommender` over `queries`.
pub fn run_generative(name: &str, recommender: &Recommender<'_>, queries: &[&LabeledQuery], k: usize, cfg: &DecodeConfig) -> Result<MethodRun> {
    let mut ranked = Vec::with_capacity(queries.len());
    let mut steps = 0usize;
    let mut hyps = 0usize;
    let mut unresolved = 0usize;
    for q in queries {
        let r = recommender.recommend(&q.text(), k, cfg)?;
        steps += r.hypotheses.iter().map(|(_, h)| h.tokens.len()).sum::<usize>();
        hyps += r.hypotheses.len();
        unresolved += r.misses;
        ranked.push(r.ranked);
    }
    Ok(MethodRun {
        method: name.to_string(),
        ranked,
        mean_decode_steps: Some(if hyps == 0 { 0.0 } else { steps as f64 / hyps as f64 }),
        unresolved: Some(unresolved),
    })
}

pub fn run_baseline(name: &str, baseline: &Baseline, queries: &[&LabeledQuery], k: usize) -> MethodRun {
    MethodRun {
        method: name.to_string(),
        ranked: queries.iter().map(|q| baseline.retrieve(&q.text(), k)).collect(),
        mean_decode_steps: None,
        unresolved: None,
    }
}

/// Scores every run and tests every pair of methods, Bonferroni-adjusted
/// over the number of pairs.
pub fn build_report(corpus: &Corpus, queries: &[&LabeledQuery], runs: Vec<MethodRun>, k: usize, metadata: BTreeMap<String, String>) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no test queries".into()));
    }
    let mut seen = HashMap::new();
    let mut methods = Vec::with_capacity(runs.len());
    for run in runs {
        if run.ranked.len() != queries.len() {
            return Err(Error::DimensionMismatch {
                expected: queries.len(),
                got: run.ranked.len(),
            });
        }
        if seen.insert(run.method.clone(), ()).is_some() {
            return Err(Error::InvalidInput(format!("method `{}` listed twice", run.method)));
        }
        let per_query = run
            .ranked
            .iter()
            .zip(queries)
            .map(|(r, q)| hits_at_k(r, &q.relevant_track_keys, k))
            .collect::<Result<Vec<f64>>>()?;
        methods.push(MethodResult {
            method: run.method,
            hits_at_k: per_query.iter().sum::<f64>() / per_query.len() as f64,
            per_query,
            artist_entropy: artist_entropy(&run.ranked, corpus)?,
            artist_entropy_per_query: artist_entropy_per_query(&run.ranked, corpus)?,
            mean_decode_steps: run.mean_decode_steps,
            unresolved: run.unresolved,
        });
    }
    let pairs = methods.len() * methods.len().saturating_sub(1) / 2;
    let mut significance = Vec::with_capacity(pairs);
    if queries.len() >= 2 {
        for i in 0..methods.len() {
            for j in i + 1..methods.len() {
                significance.push(Comparison {
                    a: methods[i].method.clone(),
                    b: methods[j].method.clone(),
                    adjusted_p: paired_ttest_bonferroni(&methods[i].per_query, &methods[j].per_query, pairs)?,
                });
            }
        }
    }
    Ok(EvalReport {
        k,
        queries: queries.len(),
        methods,
        significance,
        metadata,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub hits_at_k: f64,
    pub artist_entropy: f64,
}

/// One evaluation per penalty value with everything else shared.
pub fn sweep_homogeneity(
    recommender: &Recommender<'_>,
    corpus: &Corpus,
    queries: &[&LabeledQuery],
    lambdas: &[f64],
    k: usize,
    base: &DecodeConfig,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidInput("no penalty values".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = DecodeConfig {
                diversity_penalty: lambda,
                ..base.clone()
            };
            let run = run_generative("sweep", recommender, queries, k, &cfg)?;
            let report = build_report(corpus, queries, vec![run], k, BTreeMap::new())?;
            let m = &report.methods[0];
            Ok(SweepRow {
                lambda,
                hits_at_k: m.hits_at_k,
                artist_entropy: m.artist_entropy,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow], k: usize) -> String {
    let mut s = format!("lambda\thits@{k}\tartist_entropy\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.lambda, r.hits_at_k, r.artist_entropy));
    }
    s
}
