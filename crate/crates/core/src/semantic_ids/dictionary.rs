use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;

use super::omp::{least_squares, sparse_code, SparseCoding};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::util;

const MAGIC: &str = "T2TDICT1";

/// `s` unit-norm atoms of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Vec<f64>,
    s: usize,
    d: usize,
    c: usize,
    pub seed: u64,
    pub iterations: usize,
    /// Mean squared reconstruction error after the initial coding and after
    /// every iteration.
    pub error_history: Vec<f64>,
}

impl Dictionary {
    /// Builds a dictionary from raw atoms, normalizing each to unit length.
    pub fn from_atoms(mut atoms: Vec<f64>, s: usize, d: usize, c: usize, seed: u64) -> Result<Self> {
        if atoms.len() != s * d {
            return Err(Error::DimensionMismatch {
                expected: s * d,
                got: atoms.len(),
            });
        }
        if c == 0 || c > s {
            return Err(Error::config("semantic.c", format!("need 1 <= c <= s, got c={c}, s={s}")));
        }
        for row in atoms.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::InvalidInput("dictionary atom with zero or non-finite norm".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Dictionary {
            atoms,
            s,
            d,
            c,
            seed,
            iterations: 0,
            error_history: Vec::new(),
        })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.d..(j + 1) * self.d]
    }

    pub fn final_error(&self) -> f64 {
        self.error_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "{} {} {} {} {} {}", self.s, self.c, self.d, self.seed, self.iterations, self.final_error());
        for j in 0..self.s {
            let row: Vec<String> = self.atom(j).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Format("missing T2TDICT1 header".into()));
        }
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("missing dictionary header".into()))?
            .split_whitespace()
            .collect();
        let num = |i: usize| -> Result<usize> {
            header.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("bad header field {i}")))
        };
        let (s, c, d) = (num(0)?, num(1)?, num(2)?);
        let seed = num(3)? as u64;
        let iterations = num(4)?;
        let final_error: f64 = header.get(5).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        let mut atoms = Vec::with_capacity(s * d);
        for line in lines.take(s) {
            for v in line.split_whitespace() {
                atoms.push(v.parse::<f64>().map_err(|e| Error::Format(e.to_string()))?);
            }
        }
        if atoms.len() != s * d || c == 0 || c > s {
            return Err(Error::Format(format!("expected {s} atoms of dimension {d} with 1 <= c <= s")));
        }
        for row in atoms.chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!("atom norm {n} is not 1")));
            }
        }
        Ok(Dictionary {
            atoms,
            s,
            d,
            c,
            seed,
            iterations,
            error_history: vec![final_error],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(util::write_atomic(path, self.to_text().as_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn squared_error(x: &[f64], coding: &SparseCoding, dict: &Dictionary) -> f64 {
    let r = coding.reconstruct(dict);
    x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Alternating minimization: sparse-code every item, then update each atom
/// by block coordinate descent on `sum ||x - D a||^2` with the atom
/// constrained to the unit sphere. Unused atoms are re-seeded from the
/// residuals of the worst-reconstructed items.
///
/// Recoding keeps, per item, the better of the fresh OMP code and a
/// least-squares refit on its previous support, so the tracked mean error
/// never increases.
pub fn learn_dictionary(table: &EmbeddingTable, s: usize, c: usize, iters: usize, seed: u64) -> Result<Dictionary> {
    if iters == 0 {
        return Err(Error::config("semantic.iters", "must be >= 1"));
    }
    if c == 0 || c > s {
        return Err(Error::config("semantic.c", format!("need 1 <= c <= s, got c={c}, s={s}")));
    }
    let d = table.dim();
    let mut items: Vec<Vec<f64>> = Vec::with_capacity(table.len());
    for (k, row) in table.iter() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k.to_string()));
        }
        items.push(row.iter().map(|&v| v as f64).collect());
    }
    let usable: Vec<usize> = (0..items.len()).filter(|&i| items[i].iter().any(|&v| v != 0.0)).collect();
    if usable.len() < s {
        return Err(Error::InvalidInput(format!(
            "dictionary of size {s} needs at least {s} non-zero embeddings, table has {}",
            usable.len()
        )));
    }

    let mut rng = util::rng(seed, "dictionary");
    let picks = sample(&mut rng, usable.len(), s);
    let mut atoms = Vec::with_capacity(s * d);
    for p in picks.iter() {
        atoms.extend_from_slice(&items[usable[p]]);
    }
    let mut dict = Dictionary::from_atoms(atoms, s, d, c, seed)?;

    let mut codes: Vec<SparseCoding> = items.iter().map(|x| sparse_code(x, &dict)).collect::<Result<_>>()?;
    let n = items.len() as f64;
    let mut err: Vec<f64> = items.iter().zip(&codes).map(|(x, a)| squared_error(x, a, &dict)).collect();
    dict.error_history.push(err.iter().sum::<f64>() / n);

    for it in 0..iters {
        update_atoms(&mut dict, &items, &codes, &err);

        for (i, x) in items.iter().enumerate() {
            let fresh = sparse_code(x, &dict)?;
            let fresh_err = squared_error(x, &fresh, &dict);
            let support: Vec<usize> = codes[i].entries.iter().map(|e| e.0).collect();
            let refit = least_squares(x, &dict, &support).map(|a| SparseCoding {
                entries: support.iter().copied().zip(a).collect(),
            });
            match refit {
                Some(r) if squared_error(x, &r, &dict) < fresh_err => {
                    err[i] = squared_error(x, &r, &dict);
                    codes[i] = r;
                }
                _ => {
                    err[i] = fresh_err;
                    codes[i] = fresh;
                }
            }
        }
        let mean = err.iter().sum::<f64>() / n;
        log::debug!("dictionary iteration {it}: mean squared error {mean:.6}");
        dict.error_history.push(mean);
        dict.iterations += 1;
    }
    Ok(dict)
}

fn update_atoms(dict: &mut Dictionary, items: &[Vec<f64>], codes: &[SparseCoding], err: &[f64]) {
    let (s, d) = (dict.s, dict.d);
    // Sufficient statistics A = sum a a^T (s x s) and B = sum x a^T (s x d, by atom).
    let mut a_mat = vec![0.0; s * s];
    let mut b_mat = vec![0.0; s * d];
    for (x, code) in items.iter().zip(codes) {
        for &(j, aj) in &code.entries {
            for &(k, ak) in &code.entries {
                a_mat[j * s + k] += aj * ak;
            }
            for (b, v) in b_mat[j * d..(j + 1) * d].iter_mut().zip(x) {
                *b += aj * v;
            }
        }
    }
    let mut dead = Vec::new();
    for j in 0..s {
        if a_mat[j * s + j] <= 1e-12 {
            dead.push(j);
            continue;
        }
        // v = b_j - sum_{k != j} d_k A_kj; the sphere-constrained minimizer is v / |v|.
        let mut v = b_mat[j * d..(j + 1) * d].to_vec();
        for k in (0..s).filter(|&k| k != j) {
            let akj = a_mat[k * s + j];
            if akj != 0.0 {
                for (vi, dk) in v.iter_mut().zip(&dict.atoms[k * d..(k + 1) * d]) {
                    *vi -= akj * dk;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for (a, vi) in dict.atoms[j * d..(j + 1) * d].iter_mut().zip(&v) {
                *a = vi / norm;
            }
        }
    }
    if dead.is_empty() {
        return;
    }
    let mut worst: Vec<usize> = (0..items.len()).filter(|&i| err[i] > 1e-12).collect();
    worst.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
    for (j, &i) in dead.iter().zip(&worst) {
        let mut r = items[i].clone();
        for (k, a) in &codes[i].entries {
            for (ri, v) in r.iter_mut().zip(dict.atom(*k).to_vec()) {
                *ri -= a * v;
            }
        }
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for (a, ri) in dict.atoms[j * d..(j + 1) * d].iter_mut().zip(&r) {
                *a = ri / norm;
            }
        }
    }
}
