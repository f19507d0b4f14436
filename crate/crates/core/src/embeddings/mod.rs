//! Track embedding tables: skip-gram over playlist sequences (`cf`) and a
//! TF-IDF random-projection text encoder (`text`).

mod skipgram;
mod text;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub use skipgram::{positive_pairs, sgns_loss_and_grad, train_skipgram, SkipgramConfig};
pub use text::{embed_texts, track_text, tokenize_text, TextEncoder};

const MAGIC: &str = "T2TEMB1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Cf,
    Text,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Cf => "cf",
            Provenance::Text => "text",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cf" => Ok(Provenance::Cf),
            "text" => Ok(Provenance::Text),
            other => Err(Error::Format(format!("unknown provenance `{other}`"))),
        }
    }
}

/// Dense vector per track, rows in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    provenance: Provenance,
    keys: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        EmbeddingTable {
            dim,
            provenance,
            keys: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, row: &[f32]) -> Result<()> {
        let key = key.into();
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(key));
        }
        if self.index.contains_key(&key) {
            return Err(Error::InvalidInput(format!("duplicate embedding row `{key}`")));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), self.row(i)))
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        Some(util::cosine(self.get(a)?, self.get(b)?))
    }

    pub fn fingerprint(&self) -> String {
        util::fingerprint([self.to_text().as_bytes()])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 12);
        s.push_str(MAGIC);
        s.push_str(&format!("{} {} {}\n", self.len(), self.dim, self.provenance));
        for (k, row) in self.iter() {
            s.push_str(k);
            s.push('\t');
            for (j, x) in row.iter().enumerate() {
                if j > 0 {
                    s.push(' ');
                }
                s.push_str(&x.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Format("missing T2TEMB1 magic".into()))?;
        let mut lines = body.lines();
        let header = lines.next().ok_or_else(|| Error::Format("missing header".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 {
            return Err(Error::Format(format!("bad header `{header}`")));
        }
        let count: usize = h[0].parse().map_err(|_| Error::Format("bad count".into()))?;
        let dim: usize = h[1].parse().map_err(|_| Error::Format("bad dim".into()))?;
        let mut table = EmbeddingTable::new(dim, h[2].parse()?);
        for (i, line) in lines.enumerate() {
            let (key, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("row {}: missing tab", i + 1)))?;
            let row: Vec<f32> = rest
                .split(' ')
                .map(|x| x.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
            table.push(key, &row)?;
        }
        if table.len() != count {
            return Err(Error::Format(format!("header says {count} rows, found {}", table.len())));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(util::write_atomic(path, self.to_text().as_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn file_round_trip_is_lossless(rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 8), 1..6)) {
            let mut t = EmbeddingTable::new(8, Provenance::Cf);
            for (i, r) in rows.iter().enumerate() {
                t.push(format!("k{i}"), r).unwrap();
            }
            let back = EmbeddingTable::from_text(&t.to_text()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn rejects_bad_rows() {
        let mut t = EmbeddingTable::new(2, Provenance::Text);
        assert!(t.push("a", &[1.0]).is_err());
        assert!(matches!(t.push("b", &[f32::NAN, 0.0]), Err(Error::NonFinite(k)) if k == "b"));
        assert!(EmbeddingTable::from_text("nope").is_err());
    }
}
