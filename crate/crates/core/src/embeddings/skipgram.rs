use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, Provenance};
use crate::corpus::Playlist;
use crate::error::{Error, Result};
use crate::numeric::{dot, log_sigmoid, sigmoid, Real};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// Frequent-item subsampling threshold; 0 disables it.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_learning_rate: 1e-4,
            subsample: 0.0,
            seed: 0,
        }
    }
}

impl SkipgramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::config("embeddings.dim", "must be >= 8"));
        }
        if self.window < 1 {
            return Err(Error::config("embeddings.window", "must be >= 1"));
        }
        if self.negatives < 1 {
            return Err(Error::config("embeddings.negatives", "must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(Error::config("embeddings.epochs", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.min_learning_rate >= 0.0) {
            return Err(Error::config("embeddings.learning_rate", "must be positive"));
        }
        if self.subsample < 0.0 {
            return Err(Error::config("embeddings.subsample", "must be >= 0"));
        }
        Ok(())
    }
}

/// Ordered `(center, context)` position pairs with `0 < |center - context| <= window`.
pub fn positive_pairs(len: usize, window: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for c in 0..len {
        let lo = c.saturating_sub(window);
        let hi = (c + window).min(len.saturating_sub(1));
        for o in lo..=hi {
            if o != c {
                out.push((c, o));
            }
        }
    }
    out
}

/// Negative-sampling loss `-log s(h.c) - sum log s(-h.n)` and its gradients
/// with respect to the center vector, the context vector and each negative.
pub fn sgns_loss_and_grad<T: Real>(center: &[T], context: &[T], negatives: &[&[T]]) -> (T, Vec<T>, Vec<T>, Vec<Vec<T>>) {
    let mut g_center = vec![T::zero(); center.len()];
    let (loss_pos, coeff) = logistic_term(center, context, true);
    let g_context: Vec<T> = center.iter().map(|&h| coeff * h).collect();
    for (g, &c) in g_center.iter_mut().zip(context) {
        *g += coeff * c;
    }
    let mut loss = loss_pos;
    let mut g_negs = Vec::with_capacity(negatives.len());
    for n in negatives {
        let (l, coeff) = logistic_term(center, n, false);
        loss += l;
        g_negs.push(center.iter().map(|&h| coeff * h).collect());
        for (g, &x) in g_center.iter_mut().zip(n.iter()) {
            *g += coeff * x;
        }
    }
    (loss, g_center, g_context, g_negs)
}

/// Loss of one logistic term and `dloss/d(h.o)`.
fn logistic_term<T: Real>(h: &[T], o: &[T], positive: bool) -> (T, T) {
    let x = dot(h, o);
    if positive {
        (-log_sigmoid(x), sigmoid(x) - T::one())
    } else {
        (-log_sigmoid(-x), sigmoid(x))
    }
}

/// Trains skip-gram with negative sampling on playlist track sequences and
/// returns the input-side vectors. Single-threaded and deterministic.
pub fn train_skipgram(playlists: &[&Playlist], cfg: &SkipgramConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;
    if !playlists.iter().any(|p| p.track_keys.len() >= 2) {
        return Err(Error::InvalidInput("skip-gram needs at least one playlist with two tracks".into()));
    }
    let mut vocab: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut counts: Vec<u64> = Vec::new();
    let seqs: Vec<Vec<usize>> = playlists
        .iter()
        .map(|p| {
            p.track_keys
                .iter()
                .map(|k| {
                    let i = *index.entry(k.as_str()).or_insert_with(|| {
                        vocab.push(k.as_str());
                        counts.push(0);
                        vocab.len() - 1
                    });
                    counts[i] += 1;
                    i
                })
                .collect()
        })
        .collect();

    let dim = cfg.dim;
    let n = vocab.len();
    let mut rng = util::rng(cfg.seed, "skipgram");
    let scale = 0.5 / dim as f32;
    let mut input: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-scale..scale)).collect();
    let mut output = vec![0.0f32; n * dim];
    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75))).expect("non-empty vocabulary");
    let total_tokens: u64 = counts.iter().sum();
    let keep_prob: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if cfg.subsample > 0.0 {
                let f = c as f64 / total_tokens as f64;
                ((cfg.subsample / f).sqrt() + cfg.subsample / f).min(1.0)
            } else {
                1.0
            }
        })
        .collect();

    let total_steps = (cfg.epochs * seqs.iter().map(|s| positive_pairs(s.len(), cfg.window).len()).sum::<usize>()).max(1);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut dh = vec![0.0f32; dim];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for &si in &order {
            let full = &seqs[si];
            let seq: Vec<usize> = if cfg.subsample > 0.0 {
                full.iter().copied().filter(|&t| rng.gen::<f64>() < keep_prob[t]).collect()
            } else {
                full.clone()
            };
            for (c, o) in positive_pairs(seq.len(), cfg.window) {
                let progress = step as f64 / total_steps as f64;
                let lr = (cfg.learning_rate * (1.0 - progress)).max(cfg.min_learning_rate) as f32;
                step += 1;
                let center = seq[c];
                let context = seq[o];
                dh.iter_mut().for_each(|x| *x = 0.0);
                let h = &input[center * dim..(center + 1) * dim];
                epoch_loss += update_output(h, &mut output[context * dim..(context + 1) * dim], true, lr, &mut dh) as f64;
                for _ in 0..cfg.negatives {
                    let neg = noise.sample(&mut rng);
                    if neg == context {
                        continue;
                    }
                    epoch_loss += update_output(h, &mut output[neg * dim..(neg + 1) * dim], false, lr, &mut dh) as f64;
                }
                for (x, d) in input[center * dim..(center + 1) * dim].iter_mut().zip(&dh) {
                    *x -= *d;
                }
            }
        }
        log::debug!("skip-gram epoch {epoch}: loss {epoch_loss:.4}");
    }

    let mut table = EmbeddingTable::new(dim, Provenance::Cf);
    for (i, k) in vocab.iter().enumerate() {
        table.push(*k, &input[i * dim..(i + 1) * dim])?;
    }
    Ok(table)
}

/// SGD step on one output vector; accumulates the scaled center gradient in `dh`.
fn update_output(h: &[f32], o: &mut [f32], positive: bool, lr: f32, dh: &mut [f32]) -> f32 {
    let (loss, coeff) = logistic_term(h, o, positive);
    let g = lr * coeff;
    for ((d, x), &hv) in dh.iter_mut().zip(o.iter_mut()).zip(h) {
        *d += g * *x;
        *x -= g * hv;
    }
    loss
}
