use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, StandardNormal};

use super::{EmbeddingTable, Provenance};
use crate::corpus::LabeledQuery;
use crate::error::{Error, Result};
use crate::util;

/// Lowercased alphanumeric unigrams.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Space-joined texts of every train query that lists the track as relevant.
pub fn track_text(track_key: &str, train_queries: &[&LabeledQuery]) -> String {
    let texts: Vec<String> = train_queries
        .iter()
        .filter(|q| q.relevant_track_keys.iter().any(|k| k == track_key))
        .map(|q| q.text())
        .collect();
    texts.join(" ")
}

/// TF-IDF weighting followed by a seeded Gaussian random projection and L2
/// normalization. Each term's projection row is derived from `(seed, term)`
/// alone, so it does not depend on vocabulary order.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    dim: usize,
    idf: BTreeMap<String, f64>,
    projection: HashMap<String, Vec<f64>>,
}

impl TextEncoder {
    pub fn fit<S: AsRef<str>>(texts: &[S], dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::config("dim", "must be >= 8"));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            let mut terms = tokenize_text(t.as_ref());
            terms.sort();
            terms.dedup();
            for term in terms {
                *df.entry(term).or_default() += 1;
            }
        }
        let n = texts.len() as f64;
        let mut idf = BTreeMap::new();
        let mut projection = HashMap::new();
        for (term, d) in df {
            idf.insert(term.clone(), ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0);
            let mut rng = util::rng(seed, &format!("proj:{term}"));
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            projection.insert(term, row);
        }
        Ok(TextEncoder { dim, idf, projection })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit vector, or zeros when no term of `text` is in the vocabulary.
    pub fn encode(&self, text: &str) -> Vec<f32> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for term in tokenize_text(text) {
            *tf.entry(term).or_default() += 1.0;
        }
        let mut v = vec![0.0f64; self.dim];
        for (term, count) in tf {
            if let (Some(idf), Some(row)) = (self.idf.get(&term), self.projection.get(&term)) {
                let w = count * idf;
                for (x, r) in v.iter_mut().zip(row) {
                    *x += w * r;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter().map(|x| (x / norm) as f32).collect()
        } else {
            vec![0.0; self.dim]
        }
    }
}

/// Fits a [`TextEncoder`] on `texts` and embeds each under its key.
pub fn embed_texts(keys: &[String], texts: &[String], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if keys.len() != texts.len() {
        return Err(Error::DimensionMismatch {
            expected: keys.len(),
            got: texts.len(),
        });
    }
    let enc = TextEncoder::fit(texts, dim, seed)?;
    let mut table = EmbeddingTable::new(dim, Provenance::Text);
    for (k, t) in keys.iter().zip(texts) {
        table.push(k.clone(), &enc.encode(t))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(text: &str, rel: &[&str]) -> LabeledQuery {
        LabeledQuery {
            utterances: vec![text.into()],
            relevant_track_keys: rel.iter().map(|s| s.to_string()).collect(),
            playlist_key: None,
        }
    }

    #[test]
    fn track_text_concatenates_in_query_order() {
        let qs = [q("rock anthems", &["t1", "t2"]), q("jazz", &["t2"]), q("gym rock", &["t1"])];
        let refs: Vec<&LabeledQuery> = qs.iter().collect();
        assert_eq!(track_text("t1", &refs), "rock anthems gym rock");
        assert_eq!(track_text("t2", &refs), "rock anthems jazz");
        assert_eq!(track_text("t9", &refs), "");
    }

    #[test]
    fn identical_and_empty_texts() {
        let keys: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let texts: Vec<String> = ["chill jazz", "chill jazz", ""].iter().map(|s| s.to_string()).collect();
        let t = embed_texts(&keys, &texts, 64, 1).unwrap();
        assert_eq!(t.get("a"), t.get("b"));
        assert!(t.get("c").unwrap().iter().all(|&x| x == 0.0));
        let n: f64 = t.get("a").unwrap().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_texts_are_nearly_orthogonal() {
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let texts: Vec<String> = words.chunks(4).map(|c| c.join(" ")).collect();
        let keys: Vec<String> = (0..texts.len()).map(|i| i.to_string()).collect();
        let t = embed_texts(&keys, &texts, 64, 11).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                total += t.cosine(&keys[i], &keys[j]).unwrap().abs();
                n += 1.0;
            }
        }
        assert!(total / n < 0.15, "mean |cos| {}", total / n);
        assert!(t.cosine("0", "1").unwrap().abs() < 0.15);
    }
}
