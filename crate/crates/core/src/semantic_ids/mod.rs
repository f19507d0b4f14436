//! Learned semantic IDs: a unit-norm dictionary learned over track
//! embeddings, exact-`c` sparse coding by orthogonal matching pursuit, and
//! signed atom-index tokens ordered by coefficient magnitude.

mod dictionary;
mod omp;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

pub use dictionary::{learn_dictionary, Dictionary};
pub use omp::{sparse_code, SparseCoding};

pub const PAD_TOKEN: &str = "<pad>";

/// Coefficients below this magnitude are treated as zero.
pub const PRUNE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IdToken {
    Atom { index: usize, positive: bool },
    Pad,
}

impl fmt::Display for IdToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdToken::Atom { index, positive: true } => write!(f, "<+{index}>"),
            IdToken::Atom { index, positive: false } => write!(f, "<-{index}>"),
            IdToken::Pad => f.write_str(PAD_TOKEN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId {
    pub tokens: Vec<IdToken>,
}

impl SemanticId {
    pub fn first(&self) -> Option<IdToken> {
        self.tokens.first().copied()
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tokens {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for SemanticId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut rest = s;
        while !rest.is_empty() {
            let end = rest.find('>').ok_or_else(|| Error::Format(format!("unterminated token in `{s}`")))?;
            let tok = &rest[..=end];
            rest = &rest[end + 1..];
            if tok == PAD_TOKEN {
                tokens.push(IdToken::Pad);
                continue;
            }
            let inner = tok
                .strip_prefix('<')
                .and_then(|t| t.strip_suffix('>'))
                .ok_or_else(|| Error::Format(format!("bad token `{tok}`")))?;
            let (positive, digits) = match inner.as_bytes().first() {
                Some(b'+') => (true, &inner[1..]),
                Some(b'-') => (false, &inner[1..]),
                _ => return Err(Error::Format(format!("bad token `{tok}`"))),
            };
            let index = digits.parse().map_err(|_| Error::Format(format!("bad token `{tok}`")))?;
            tokens.push(IdToken::Atom { index, positive });
        }
        Ok(SemanticId { tokens })
    }
}

/// Orders entries by `|a|` descending (ties: ascending index), renders signs
/// and pads to exactly `c` tokens.
pub fn derive_id(coding: &SparseCoding, c: usize) -> SemanticId {
    let mut entries: Vec<(usize, f64)> = coding.entries.iter().copied().filter(|(_, a)| a.abs() >= PRUNE_EPS).collect();
    entries.sort_by(|x, y| y.1.abs().total_cmp(&x.1.abs()).then(x.0.cmp(&y.0)));
    let mut tokens: Vec<IdToken> = entries
        .into_iter()
        .take(c)
        .map(|(index, a)| IdToken::Atom { index, positive: a > 0.0 })
        .collect();
    tokens.resize(c, IdToken::Pad);
    SemanticId { tokens }
}

/// The full lexicon: `<+j>`, `<-j>` for every atom, then `<pad>`.
pub fn lexicon(s: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(2 * s + 1);
    for j in 0..s {
        out.push(format!("<+{j}>"));
        out.push(format!("<-{j}>"));
    }
    out.push(PAD_TOKEN.to_string());
    out
}

#[derive(Debug, Clone)]
pub struct SemanticAssignment {
    /// In embedding-table row order.
    pub ids: Vec<(String, SemanticId)>,
    pub stats: CollisionStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionStats {
    pub tracks: usize,
    pub distinct_ids: usize,
    /// Tracks whose ID is shared with at least one other track.
    pub colliding_tracks: usize,
    pub max_bucket: usize,
}

impl CollisionStats {
    pub fn collision_rate(&self) -> f64 {
        if self.tracks == 0 {
            0.0
        } else {
            self.colliding_tracks as f64 / self.tracks as f64
        }
    }
}

pub fn assign_semantic_ids(table: &EmbeddingTable, dict: &Dictionary) -> Result<SemanticAssignment> {
    if table.dim() != dict.dim() {
        return Err(Error::DimensionMismatch {
            expected: dict.dim(),
            got: table.dim(),
        });
    }
    let mut ids = Vec::with_capacity(table.len());
    let mut buckets: HashMap<SemanticId, usize> = HashMap::new();
    for (key, row) in table.iter() {
        let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let id = derive_id(&sparse_code(&x, dict)?, dict.c());
        *buckets.entry(id.clone()).or_default() += 1;
        ids.push((key.to_string(), id));
    }
    let stats = CollisionStats {
        tracks: ids.len(),
        distinct_ids: buckets.len(),
        colliding_tracks: buckets.values().filter(|&&n| n > 1).sum(),
        max_bucket: buckets.values().copied().max().unwrap_or(0),
    };
    Ok(SemanticAssignment { ids, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coding(entries: &[(usize, f64)]) -> SparseCoding {
        SparseCoding {
            entries: entries.to_vec(),
        }
    }

    #[test]
    fn orders_by_magnitude() {
        let id = derive_id(&coding(&[(4, 0.9), (0, -0.5), (7, 0.1)]), 3);
        assert_eq!(id.to_string(), "<+4><-0><+7>");
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(derive_id(&coding(&[(5, 0.5), (2, -0.5)]), 2).to_string(), "<-2><+5>");
    }

    #[test]
    fn pads_short_codings() {
        assert_eq!(derive_id(&coding(&[]), 3).to_string(), "<pad><pad><pad>");
        assert_eq!(derive_id(&coding(&[(1, 1e-12), (3, -2.0)]), 2).to_string(), "<-3><pad>");
    }

    #[test]
    fn parses_rendered_ids() {
        for s in ["<+4><-0><+7>", "<pad><pad>", "<-12><pad>"] {
            assert_eq!(s.parse::<SemanticId>().unwrap().to_string(), s);
        }
        assert!("<4>".parse::<SemanticId>().is_err());
        assert!("<+4".parse::<SemanticId>().is_err());
    }

    #[test]
    fn lexicon_has_two_s_plus_pad() {
        let l = lexicon(4);
        assert_eq!(l.len(), 9);
        assert_eq!(l[0], "<+0>");
        assert_eq!(l[8], "<pad>");
    }
}
