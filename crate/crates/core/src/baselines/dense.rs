use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_documents, top_k};
use crate::corpus::Corpus;
use crate::decoder::RankedList;
use crate::embeddings::TextEncoder;
use crate::error::{Error, Result};
use crate::numeric::Real;
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on cosine similarities inside the softmax.
    pub scale: f64,
    pub seed: u64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            dim: 256,
            epochs: 2,
            batch_size: 64,
            learning_rate: 1e-3,
            scale: 20.0,
            seed: 0,
        }
    }
}

impl DenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::config("dense.dim", "must be >= 8"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("dense.batch_size", "in-batch negatives need >= 2"));
        }
        if !(self.learning_rate > 0.0 && self.scale > 0.0) {
            return Err(Error::config("dense.learning_rate", "learning_rate and scale must be positive"));
        }
        Ok(())
    }
}

/// Cosine bi-encoder over TF-IDF projections, optionally followed by a
/// learned shared linear map.
#[derive(Debug, Clone)]
pub struct DenseRetriever {
    encoder: TextEncoder,
    projection: Option<Vec<f64>>,
    keys: Vec<String>,
    /// Unit-norm document vectors after projection, row-major.
    docs: Vec<f64>,
}

fn normalize_rows<T: Real>(z: &mut [T], dim: usize) -> Vec<T> {
    z.chunks_exact_mut(dim)
        .map(|row| {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
            n
        })
        .collect()
}

/// Mean in-batch softmax cross-entropy of `scale * cos(W q_i, W d_j)` with
/// targets on the diagonal. `w` is `dim x dim` row-major; returns the loss
/// and `dL/dW`.
pub fn contrastive_loss_and_grad<T: Real>(w: &[T], queries: &[T], docs: &[T], dim: usize, scale: f64) -> (f64, Vec<T>) {
    let b = queries.len() / dim;
    let mut zq = vec![T::zero(); b * dim];
    let mut zd = vec![T::zero(); b * dim];
    T::gemm(b, dim, dim, T::one(), queries, false, w, true, T::zero(), &mut zq);
    T::gemm(b, dim, dim, T::one(), docs, false, w, true, T::zero(), &mut zd);
    let nq = normalize_rows(&mut zq, dim);
    let nd = normalize_rows(&mut zd, dim);
    let mut s = vec![T::zero(); b * b];
    T::gemm(b, dim, b, T::of(scale), &zq, false, &zd, true, T::zero(), &mut s);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, row) in s.chunks_exact_mut(b).enumerate() {
        let lp = crate::lm::log_softmax_row(row);
        loss -= lp[i];
        for (j, v) in row.iter_mut().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            *v = T::of((lp[j].exp() - target) * inv_b * scale);
        }
    }
    // Gradients w.r.t. the unit vectors, then through the normalization.
    let mut duq = vec![T::zero(); b * dim];
    let mut dud = vec![T::zero(); b * dim];
    T::gemm(b, b, dim, T::one(), &s, false, &zd, false, T::zero(), &mut duq);
    T::gemm(b, b, dim, T::one(), &s, true, &zq, false, T::zero(), &mut dud);
    for (du, (u, n)) in [(&mut duq, (&zq, &nq)), (&mut dud, (&zd, &nd))] {
        for r in 0..b {
            let row = &mut du[r * dim..(r + 1) * dim];
            let ur = &u[r * dim..(r + 1) * dim];
            if n[r] == T::zero() {
                row.iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            let proj = crate::numeric::dot(row, ur);
            for (g, &uv) in row.iter_mut().zip(ur) {
                *g = (*g - uv * proj) / n[r];
            }
        }
    }
    let mut grad = vec![T::zero(); dim * dim];
    T::gemm(dim, b, dim, T::one(), &duq, true, queries, false, T::zero(), &mut grad);
    T::gemm(dim, b, dim, T::one(), &dud, true, docs, false, T::one(), &mut grad);
    (loss * inv_b, grad)
}

impl DenseRetriever {
    fn with_projection(encoder: TextEncoder, keys: Vec<String>, raw_docs: Vec<f64>, projection: Option<Vec<f64>>) -> Self {
        let dim = encoder.dim();
        let mut docs = match &projection {
            Some(w) => {
                let mut z = vec![0.0; raw_docs.len()];
                f64::gemm(keys.len(), dim, dim, 1.0, &raw_docs, false, w, true, 0.0, &mut z);
                z
            }
            None => raw_docs,
        };
        normalize_rows(&mut docs, dim);
        DenseRetriever {
            encoder,
            projection,
            keys,
            docs,
        }
    }

    fn fit_encoder(corpus: &Corpus, cfg: &DenseConfig) -> Result<(TextEncoder, Vec<String>, Vec<f64>)> {
        cfg.validate()?;
        let docs = build_documents(corpus);
        if docs.is_empty() {
            return Err(Error::InvalidInput("no documents to index".into()));
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let encoder = TextEncoder::fit(&texts, cfg.dim, cfg.seed)?;
        let raw: Vec<f64> = texts.iter().flat_map(|t| encoder.encode(t)).map(f64::from).collect();
        Ok((encoder, docs.into_iter().map(|d| d.track_key).collect(), raw))
    }

    pub fn zero_shot(corpus: &Corpus, cfg: &DenseConfig) -> Result<Self> {
        let (encoder, keys, raw) = Self::fit_encoder(corpus, cfg)?;
        Ok(Self::with_projection(encoder, keys, raw, None))
    }

    /// Trains the projection on (train query, relevant track document)
    /// pairs with in-batch negatives and Adam, starting from identity.
    pub fn fine_tuned(corpus: &Corpus, cfg: &DenseConfig) -> Result<Self> {
        let (encoder, keys, raw) = Self::fit_encoder(corpus, cfg)?;
        let dim = cfg.dim;
        let mut pairs: Vec<(Vec<f64>, usize)> = Vec::new();
        for q in corpus.train_queries() {
            let qv: Vec<f64> = encoder.encode(&q.text()).into_iter().map(f64::from).collect();
            for k in &q.relevant_track_keys {
                let d = corpus.track_position(k).expect("validated corpus");
                pairs.push((qv.clone(), d));
            }
        }
        let mut w = vec![0.0f64; dim * dim];
        (0..dim).for_each(|i| w[i * dim + i] = 1.0);
        let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut rng = util::rng(cfg.seed, "dense-ft");
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut t = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let qs: Vec<f64> = chunk.iter().flat_map(|&i| pairs[i].0.iter().copied()).collect();
                let ds: Vec<f64> = chunk.iter().flat_map(|&i| raw[pairs[i].1 * dim..(pairs[i].1 + 1) * dim].iter().copied()).collect();
                let (loss, g) = contrastive_loss_and_grad(&w, &qs, &ds, dim, cfg.scale);
                total += loss;
                batches += 1;
                t += 1;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    w[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
            log::info!("dense fine-tuning epoch {}: loss {:.4}", epoch + 1, total / batches.max(1) as f64);
        }
        Ok(Self::with_projection(encoder, keys, raw, Some(w)))
    }

    pub fn is_fine_tuned(&self) -> bool {
        self.projection.is_some()
    }

    pub fn embed_query(&self, query: &str) -> Vec<f64> {
        let dim = self.encoder.dim();
        let x: Vec<f64> = self.encoder.encode(query).into_iter().map(f64::from).collect();
        let mut z = match &self.projection {
            Some(w) => {
                let mut z = vec![0.0; dim];
                f64::gemm(1, dim, dim, 1.0, &x, false, w, true, 0.0, &mut z);
                z
            }
            None => x,
        };
        normalize_rows(&mut z, dim);
        z
    }

    /// Cosine ranking; ties by ascending track key.
    pub fn retrieve(&self, query: &str, k: usize) -> RankedList {
        let dim = self.encoder.dim();
        let q = self.embed_query(query);
        let scored = self
            .keys
            .iter()
            .zip(self.docs.chunks_exact(dim))
            .map(|(key, d)| (key.clone(), crate::numeric::dot(&q, d)))
            .collect();
        top_k(scored, k)
    }
}
