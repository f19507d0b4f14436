use super::{Dictionary, PRUNE_EPS};
use crate::error::{Error, Result};

/// Up to `c` `(atom index, coefficient)` pairs with non-zero coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCoding {
    pub entries: Vec<(usize, f64)>,
}

impl SparseCoding {
    pub fn reconstruct(&self, dict: &Dictionary) -> Vec<f64> {
        let mut out = vec![0.0; dict.dim()];
        for &(j, a) in &self.entries {
            for (o, v) in out.iter_mut().zip(dict.atom(j)) {
                *o += a * v;
            }
        }
        out
    }

    pub fn residual_norm(&self, x: &[f64], dict: &Dictionary) -> f64 {
        let r = self.reconstruct(dict);
        x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Orthogonal matching pursuit with a hard budget of `dict.c()` atoms.
///
/// Each step picks the unused atom with the largest absolute correlation
/// with the residual (ties: lowest index) and refits all selected
/// coefficients by least squares. Stops early when the residual vanishes or
/// a new atom is linearly dependent on the support.
pub fn sparse_code(x: &[f64], dict: &Dictionary) -> Result<SparseCoding> {
    if x.len() != dict.dim() {
        return Err(Error::DimensionMismatch {
            expected: dict.dim(),
            got: x.len(),
        });
    }
    let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if x_norm == 0.0 {
        return Ok(SparseCoding::default());
    }
    let mut support: Vec<usize> = Vec::with_capacity(dict.c());
    let mut coefs: Vec<f64> = Vec::new();
    let mut residual = x.to_vec();
    for _ in 0..dict.c().min(dict.s()) {
        let r_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm <= 1e-12 * x_norm {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in (0..dict.s()).filter(|j| !support.contains(j)) {
            let corr: f64 = dict.atom(j).iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>().abs();
            if best.is_none_or(|(_, b)| corr > b) {
                best = Some((j, corr));
            }
        }
        let Some((j, corr)) = best else { break };
        if corr <= 1e-12 * x_norm {
            break;
        }
        support.push(j);
        match least_squares(x, dict, &support) {
            Some(a) => coefs = a,
            None => {
                support.pop();
                break;
            }
        }
        residual = x.to_vec();
        for (&k, &a) in support.iter().zip(&coefs) {
            for (r, v) in residual.iter_mut().zip(dict.atom(k)) {
                *r -= a * v;
            }
        }
    }
    let entries = support
        .into_iter()
        .zip(coefs)
        .filter(|(_, a)| a.abs() >= PRUNE_EPS)
        .collect();
    Ok(SparseCoding { entries })
}

/// Least-squares coefficients of `x` on the atoms in `support`, via a
/// Cholesky solve of the normal equations. `None` when the atoms are
/// (numerically) linearly dependent.
pub(crate) fn least_squares(x: &[f64], dict: &Dictionary, support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut g = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for (p, &i) in support.iter().enumerate() {
        b[p] = dict.atom(i).iter().zip(x).map(|(a, v)| a * v).sum();
        for (q, &j) in support.iter().enumerate().take(p + 1) {
            let v: f64 = dict.atom(i).iter().zip(dict.atom(j)).map(|(a, c)| a * c).sum();
            g[p * k + q] = v;
            g[q * k + p] = v;
        }
    }
    // In-place Cholesky: g = L L^T.
    for p in 0..k {
        for q in 0..=p {
            let mut s = g[p * k + q];
            for r in 0..q {
                s -= g[p * k + r] * g[q * k + r];
            }
            if p == q {
                if s <= 1e-10 {
                    return None;
                }
                g[p * k + p] = s.sqrt();
            } else {
                g[p * k + q] = s / g[q * k + q];
            }
        }
    }
    let mut y = b;
    for p in 0..k {
        for r in 0..p {
            y[p] -= g[p * k + r] * y[r];
        }
        y[p] /= g[p * k + p];
    }
    for p in (0..k).rev() {
        for r in p + 1..k {
            y[p] -= g[r * k + p] * y[r];
        }
        y[p] /= g[p * k + p];
    }
    Some(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_dict(d: usize, c: usize) -> Dictionary {
        let mut atoms = vec![0.0; d * d];
        for i in 0..d {
            atoms[i * d + i] = 1.0;
        }
        Dictionary::from_atoms(atoms, d, d, c, 0).unwrap()
    }

    #[test]
    fn exact_atom_is_recovered() {
        let dict = identity_dict(5, 3);
        let coding = sparse_code(&[0.0, 0.0, 0.0, 1.0, 0.0], &dict).unwrap();
        assert_eq!(coding.entries, vec![(3, 1.0)]);
    }

    #[test]
    fn orthonormal_least_squares() {
        let dict = identity_dict(4, 2);
        let coding = sparse_code(&[2.0, -1.0, 0.0, 0.0], &dict).unwrap();
        assert_eq!(coding.entries, vec![(0, 2.0), (1, -1.0)]);
    }

    #[test]
    fn zero_vector_gives_empty_coding() {
        let dict = identity_dict(4, 2);
        assert!(sparse_code(&[0.0; 4], &dict).unwrap().entries.is_empty());
        assert!(matches!(sparse_code(&[0.0; 3], &dict), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn dependent_atoms_stop_early() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let atoms = vec![1.0, 0.0, 1.0, 0.0, s, s];
        let dict = Dictionary::from_atoms(atoms, 3, 2, 3, 0).unwrap();
        let coding = sparse_code(&[1.0, 1.0], &dict).unwrap();
        assert!(coding.entries.len() <= 2);
        assert!(coding.residual_norm(&[1.0, 1.0], &dict) < 1e-9);
    }
}
