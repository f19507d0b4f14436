//! Diverse beam search over the trained model and track ranking.

mod trie;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use trie::{IdTrie, ROOT};

use crate::error::{Error, Result};
use crate::id_registry::IdRegistry;
use crate::lm::tokenizer::{BOS, EOS};
use crate::lm::{Checkpoint, DecodeState, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub groups: usize,
    pub beams_per_group: usize,
    /// Homogeneity penalty subtracted per earlier-group use of a token.
    pub diversity_penalty: f64,
    /// Cap on generated id tokens; the model limit applies when absent.
    pub max_target_len: Option<usize>,
    pub trie_constrained: bool,
    /// Exponent of the length normalization; 0 disables it.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            groups: 10,
            beams_per_group: 2,
            diversity_penalty: 0.25,
            max_target_len: None,
            trie_constrained: true,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.beams_per_group == 0 {
            return Err(Error::config("decode.groups", "groups and beams_per_group must be >= 1"));
        }
        if !(self.diversity_penalty.is_finite() && self.diversity_penalty >= 0.0) {
            return Err(Error::config("decode.diversity_penalty", "must be finite and >= 0"));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::config("decode.length_penalty", "must be finite"));
        }
        if self.max_target_len == Some(0) {
            return Err(Error::config("decode.max_target_len", "must be >= 1"));
        }
        Ok(())
    }

    pub fn hypotheses(&self) -> usize {
        self.groups * self.beams_per_group
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Id tokens without bos/eos; their count is the decoding-step count.
    pub tokens: Vec<u32>,
    /// Accumulated log-probability including diversity penalties.
    pub log_score: f64,
    /// Ranking score after optional length normalization.
    pub score: f64,
    pub group: usize,
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    score: f64,
    state: DecodeState<f32>,
    node: usize,
    pending: u32,
}

fn ranking_score(log_score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_score
    } else {
        log_score / ((len + 1) as f64).powf(alpha)
    }
}

fn by_score_desc(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Group-wise beam search with a step-wise token-count penalty. Groups are
/// expanded in order; group `g` pays `penalty` per selection of a token by
/// groups `0..g` at the same step. Returns every finished hypothesis,
/// best first.
pub fn diverse_beam_search(
    model: &Transformer<f32>,
    trie: Option<&IdTrie>,
    source: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let max_len = cfg.max_target_len.unwrap_or(usize::MAX).min(model.config().max_target_len);
    let bg = cfg.beams_per_group;
    let enc = model.encode(source)?;
    let mut live: Vec<Vec<Beam>> = (0..cfg.groups)
        .map(|_| {
            vec![Beam {
                tokens: Vec::new(),
                score: 0.0,
                state: model.start_state(),
                node: ROOT,
                pending: BOS,
            }]
        })
        .collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); cfg.groups];

    for t in 0..=max_len {
        // Log-probabilities do not depend on the penalty, so every live beam
        // is advanced in one batch before the sequential group selection.
        let mut states: Vec<DecodeState<f32>> = Vec::new();
        let mut pending = Vec::new();
        for beams in &mut live {
            for b in beams.iter_mut() {
                states.push(std::mem::take(&mut b.state));
                pending.push(b.pending);
            }
        }
        if states.is_empty() {
            break;
        }
        let log_probs = model.step(&enc, &mut states, &pending)?;
        let mut states = states.into_iter();
        let mut lp_iter = log_probs.into_iter();

        let mut used: HashMap<u32, usize> = HashMap::new();
        for (g, beams) in live.iter_mut().enumerate() {
            let mut cands: Vec<(f64, usize, u32)> = Vec::new();
            let parents: Vec<Beam> = std::mem::take(beams)
                .into_iter()
                .map(|mut b| {
                    b.state = states.next().expect("one state per beam");
                    b
                })
                .collect();
            for (bi, b) in parents.iter().enumerate() {
                let lp = lp_iter.next().expect("one row per beam");
                let mut push = |tok: u32| {
                    let pen = cfg.diversity_penalty * used.get(&tok).copied().unwrap_or(0) as f64;
                    let s = b.score + lp[tok as usize] - pen;
                    if s > f64::NEG_INFINITY {
                        cands.push((s, bi, tok));
                    }
                };
                match trie {
                    Some(tr) => {
                        for tok in tr.allowed(b.node) {
                            if t < max_len || tok == EOS {
                                push(tok);
                            }
                        }
                    }
                    None if t == max_len => push(EOS),
                    None => (0..lp.len() as u32).for_each(&mut push),
                }
            }
            if t == 0 && cands.is_empty() {
                return Err(Error::Decode("no valid first token under the trie mask".into()));
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let done = &mut finished[g];
            for &(s, bi, tok) in &cands {
                if beams.len() == bg {
                    break;
                }
                let parent = &parents[bi];
                *used.entry(tok).or_insert(0) += 1;
                if tok == EOS {
                    done.push(Hypothesis {
                        tokens: parent.tokens.clone(),
                        log_score: s,
                        score: ranking_score(s, parent.tokens.len(), cfg.length_penalty),
                        group: g,
                    });
                    done.sort_by(by_score_desc);
                    done.truncate(bg);
                    continue;
                }
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                beams.push(Beam {
                    tokens,
                    score: s,
                    state: parent.state.clone(),
                    node: trie.and_then(|tr| tr.next(parent.node, tok)).unwrap_or(ROOT),
                    pending: tok,
                });
            }
            // Without length normalization scores only fall, so a full
            // finished set that beats every live beam closes the group.
            if cfg.length_penalty == 0.0 && done.len() == bg {
                let worst = done.last().map_or(f64::NEG_INFINITY, |h| h.log_score);
                if beams.iter().all(|b| b.score <= worst) {
                    beams.clear();
                }
            }
        }
    }
    let mut out: Vec<Hypothesis> = finished.into_iter().flatten().collect();
    out.sort_by(by_score_desc);
    Ok(out)
}

/// Ordered `(track_key, score)` pairs with non-increasing scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<(String, f64)>,
}

impl RankedList {
    /// Flattens scored buckets in order, keeping the first occurrence of
    /// each track, up to `k` entries.
    pub fn from_buckets<I>(buckets: I, k: usize) -> Self
    where
        I: IntoIterator<Item = (Vec<String>, f64)>,
    {
        let mut seen = HashSet::new();
        let mut items = Vec::new();
        'outer: for (tracks, score) in buckets {
            for t in tracks {
                if items.len() == k {
                    break 'outer;
                }
                if seen.insert(t.clone()) {
                    items.push((t, score));
                }
            }
        }
        RankedList { items }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Output of one recommendation call.
#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub ranked: RankedList,
    pub hypotheses: Vec<(String, Hypothesis)>,
    /// Generated ids that resolved to no track.
    pub misses: usize,
}

/// A checkpoint bound to the registry it was trained against.
pub struct Recommender<'a> {
    checkpoint: &'a Checkpoint,
    registry: &'a IdRegistry,
    trie: IdTrie,
}

impl<'a> Recommender<'a> {
    pub fn new(checkpoint: &'a Checkpoint, registry: &'a IdRegistry) -> Result<Self> {
        checkpoint.check_registry(registry)?;
        let trie = IdTrie::build(registry, &checkpoint.tokenizer)?;
        Ok(Recommender { checkpoint, registry, trie })
    }

    pub fn trie(&self) -> &IdTrie {
        &self.trie
    }

    pub fn encode_query(&self, query: &str) -> Result<Vec<u32>> {
        let mut src = self.checkpoint.tokenizer.encode(query);
        src.truncate(self.checkpoint.model.config().max_input_len);
        if src.is_empty() {
            return Err(Error::InvalidInput("query is empty".into()));
        }
        Ok(src)
    }

    pub fn recommend(&self, query: &str, k: usize, cfg: &DecodeConfig) -> Result<Recommendation> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be >= 1".into()));
        }
        let src = self.encode_query(query)?;
        let trie = cfg.trie_constrained.then_some(&self.trie);
        let hyps = diverse_beam_search(&self.checkpoint.model, trie, &src, cfg)?;
        let tok = &self.checkpoint.tokenizer;
        let named: Vec<(String, Hypothesis)> = hyps.into_iter().map(|h| (tok.decode(&h.tokens), h)).collect();
        let mut misses = 0;
        let buckets: Vec<(Vec<String>, f64)> = named
            .iter()
            .map(|(id, h)| {
                let b = self.registry.resolve(id);
                if b.is_empty() {
                    misses += 1;
                }
                (b, h.score)
            })
            .collect();
        Ok(Recommendation {
            ranked: RankedList::from_buckets(buckets, k),
            hypotheses: named,
            misses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn model(seed: u64) -> Transformer<f32> {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            width: 16,
            ff_width: 32,
            dropout: 0.0,
            max_input_len: 8,
            max_target_len: 4,
            seed,
        };
        Transformer::new(cfg, 12).unwrap()
    }

    /// Textbook width-`b` beam search written independently.
    fn plain_beam(m: &Transformer<f32>, src: &[u32], b: usize, max_len: usize) -> Vec<(Vec<u32>, f64)> {
        let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
        for t in 0..=max_len {
            let mut cands = Vec::new();
            for (bi, (toks, s)) in beams.iter().enumerate() {
                let lp = m.step_logits(src, toks).unwrap();
                for (v, l) in lp.iter().enumerate() {
                    if t == max_len && v as u32 != EOS {
                        continue;
                    }
                    cands.push((s + l, bi, v as u32));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (s, bi, v) in cands {
                if next.len() == b {
                    break;
                }
                if v == EOS {
                    done.push((beams[bi].0.clone(), s));
                    done.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                    done.truncate(b);
                } else {
                    let mut toks = beams[bi].0.clone();
                    toks.push(v);
                    next.push((toks, s));
                }
            }
            if done.len() == b && next.iter().all(|(_, s)| *s <= done[b - 1].1) {
                break;
            }
            beams = next;
        }
        done
    }

    #[test]
    fn single_group_without_penalty_is_plain_beam_search() {
        for seed in 0..4 {
            let m = model(seed);
            let src = [5u32, 6, 7];
            for b in [1, 3] {
                let cfg = DecodeConfig {
                    groups: 1,
                    beams_per_group: b,
                    diversity_penalty: 0.0,
                    trie_constrained: false,
                    ..Default::default()
                };
                let got = diverse_beam_search(&m, None, &src, &cfg).unwrap();
                let want = plain_beam(&m, &src, b, 4);
                assert_eq!(got.len(), want.len());
                for (g, (toks, s)) in got.iter().zip(&want) {
                    assert_eq!(&g.tokens, toks);
                    assert!((g.log_score - s).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn single_group_ignores_the_penalty() {
        let m = model(2);
        let cfg = |l| DecodeConfig {
            groups: 1,
            beams_per_group: 3,
            diversity_penalty: l,
            trie_constrained: false,
            ..Default::default()
        };
        assert_eq!(
            diverse_beam_search(&m, None, &[5, 6], &cfg(0.0)).unwrap(),
            diverse_beam_search(&m, None, &[5, 6], &cfg(7.5)).unwrap()
        );
    }

    #[test]
    fn huge_penalty_forces_distinct_first_tokens() {
        let m = model(1);
        let mut trie = IdTrie::new();
        for first in 3..11u32 {
            trie.insert(&[first, 5]).unwrap();
        }
        let cfg = DecodeConfig {
            groups: 5,
            beams_per_group: 1,
            diversity_penalty: 1e9,
            ..Default::default()
        };
        let hyps = diverse_beam_search(&m, Some(&trie), &[4, 5], &cfg).unwrap();
        let firsts: HashSet<u32> = hyps.iter().map(|h| h.tokens[0]).collect();
        assert_eq!(firsts.len(), 5);
        assert!(hyps.iter().all(|h| trie.accepts(&h.tokens)));
    }

    #[test]
    fn trie_outputs_are_registry_sequences() {
        let m = model(3);
        let mut trie = IdTrie::new();
        let seqs: [&[u32]; 4] = [&[5, 6, 7], &[5, 8], &[9], &[10, 11, 4, 3]];
        for s in seqs {
            trie.insert(s).unwrap();
        }
        let cfg = DecodeConfig {
            groups: 2,
            beams_per_group: 2,
            ..Default::default()
        };
        let hyps = diverse_beam_search(&m, Some(&trie), &[4], &cfg).unwrap();
        assert!(!hyps.is_empty());
        for h in &hyps {
            assert!(trie.accepts(&h.tokens), "{:?}", h.tokens);
        }
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn ranking_dedupes_and_truncates() {
        let r = RankedList::from_buckets(
            vec![
                (vec!["tb".to_string(), "ta".to_string()], -1.0),
                (vec!["ta".to_string()], -2.0),
                (vec![], -2.5),
                (vec!["tc".to_string()], -3.0),
            ],
            10,
        );
        assert_eq!(r.keys().collect::<Vec<_>>(), vec!["tb", "ta", "tc"]);
        let one = RankedList::from_buckets(vec![(vec!["tb".to_string(), "ta".to_string()], -1.0)], 1);
        assert_eq!(one.keys().collect::<Vec<_>>(), vec!["tb"]);
    }
}
