use nalgebra::{DMatrix, DVector};

use super::{Dictionary, NormTag, RegularizerSpec, SparseCode, ZERO_TOL};
use crate::error::{invalid, mismatch, Result};
use crate::linalg;

/// Mutual coherence of a unit-normed dictionary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coherence {
    /// `max_{i != j} <d_i, d_j>`.
    pub signed: f64,
    /// `max_{i != j} |<d_i, d_j>|`; the certificates use this one.
    pub absolute: f64,
}

pub fn mutual_coherence(dict: &Dictionary) -> Result<Coherence> {
    if dict.n_atoms() < 2 {
        return Err(invalid("coherence needs at least two atoms"));
    }
    if !dict.is_unit_normed() {
        return Err(invalid("coherence requires a unit-normed dictionary"));
    }
    Ok(coherence_of_gram(&dict.gram()))
}

pub(crate) fn coherence_of_gram(gram: &DMatrix<f64>) -> Coherence {
    let mut signed = f64::NEG_INFINITY;
    let mut absolute = 0.0_f64;
    let m = gram.nrows();
    for j in 0..m {
        for i in 0..m {
            if i != j {
                let g = gram[(i, j)];
                signed = signed.max(g);
                absolute = absolute.max(g.abs());
            }
        }
    }
    Coherence { signed, absolute }
}

/// For every atom `i`, the atoms not orthogonal to it (including `i`).
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn new(dict: &Dictionary) -> Self {
        let gram = dict.gram();
        let m = gram.nrows();
        let lists = (0..m)
            .map(|i| (0..m).filter(|&w| w == i || gram[(w, i)].abs() > ZERO_TOL).collect())
            .collect();
        Neighborhoods { lists }
    }

    pub fn of(&self, atom: usize) -> &[usize] {
        &self.lists[atom]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// `max_i |support ∩ Λ_i|`.
    pub fn stripe(&self, support: &[usize]) -> usize {
        let mut mask = vec![false; self.lists.len()];
        for &j in support {
            mask[j] = true;
        }
        self.lists.iter().map(|l| l.iter().filter(|&&w| mask[w]).count()).max().unwrap_or(0)
    }

    /// Largest neighborhood size.
    pub fn max_size(&self) -> usize {
        self.lists.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Maximal number of nonzeros of `code` inside any atom's neighborhood.
pub fn stripe_norm(code: &SparseCode, dict: &Dictionary) -> Result<usize> {
    if code.len() != dict.n_atoms() {
        return Err(mismatch(format!("code length {} vs {} atoms", code.len(), dict.n_atoms())));
    }
    Ok(Neighborhoods::new(dict).stripe(&code.support))
}

/// Stripe norm of the indicator vector of `support`.
pub fn stripe_norm_of_support(support: &[usize], dict: &Dictionary) -> Result<usize> {
    check_indices(support, dict.n_atoms())?;
    Ok(Neighborhoods::new(dict).stripe(support))
}

/// Largest number of atoms non-orthogonal to a single atom, itself included.
pub fn max_stripe(dict: &Dictionary) -> usize {
    Neighborhoods::new(dict).max_size()
}

/// `max_i ||e restricted to supp(d_i)||_2`.
pub fn local_amplitude(e: &DVector<f64>, dict: &Dictionary) -> Result<f64> {
    if e.len() != dict.n_signal() {
        return Err(mismatch(format!("vector length {} vs signal size {}", e.len(), dict.n_signal())));
    }
    Ok(dict
        .atom_supports()
        .iter()
        .map(|s| s.iter().map(|&r| e[r] * e[r]).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// `max_i |support ∩ supp(d_i)|`: the number of nonzeros a vector with this
/// support can place under a single atom of `dict`.
pub fn local_l0(support: &[usize], dict: &Dictionary) -> Result<usize> {
    check_indices(support, dict.n_signal())?;
    let mut mask = vec![false; dict.n_signal()];
    for &j in support {
        mask[j] = true;
    }
    Ok(dict.atom_supports().iter().map(|s| s.iter().filter(|&&r| mask[r]).count()).max().unwrap_or(0))
}

/// Indices of the nonzero entries.
pub fn support_of(values: &DVector<f64>) -> Vec<usize> {
    values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
}

/// Indicator of the support, widened to whole groups for L2-tagged groups.
pub fn characteristic_vector(code: &SparseCode, spec: &RegularizerSpec) -> Result<Vec<bool>> {
    spec.partition().check_len(code.len())?;
    Ok(characteristic_of_support(&code.support, spec))
}

pub(crate) fn characteristic_of_support(support: &[usize], spec: &RegularizerSpec) -> Vec<bool> {
    let p = spec.partition();
    let mut chi = vec![false; p.n_atoms()];
    for &j in support {
        chi[j] = true;
        let g = p.group_of(j);
        if spec.tags()[g] == NormTag::L2 {
            for &k in p.group(g) {
                chi[k] = true;
            }
        }
    }
    chi
}

/// True when every L2-tagged group lies entirely inside or entirely outside
/// `support`.
pub fn is_group_full(support: &[usize], spec: &RegularizerSpec) -> Result<bool> {
    check_indices(support, spec.n_atoms())?;
    let p = spec.partition();
    let mut inside = vec![false; p.n_atoms()];
    for &j in support {
        inside[j] = true;
    }
    Ok(p.groups().iter().zip(spec.tags()).filter(|(_, t)| **t == NormTag::L2).all(|(g, _)| {
        let count = g.iter().filter(|&&j| inside[j]).count();
        count == 0 || count == g.len()
    }))
}

/// Exact recovery coefficient `lambda - max_{w not in support} ||pinv(D_S) d_w||_1`.
///
/// An empty complement contributes a maximum of zero.
pub fn erc(support: &[usize], dict: &Dictionary, lambda: f64) -> Result<f64> {
    check_indices(support, dict.n_atoms())?;
    let mut inside = vec![false; dict.n_atoms()];
    for &j in support {
        if inside[j] {
            return Err(invalid(format!("support lists atom {j} twice")));
        }
        inside[j] = true;
    }
    let outside: Vec<usize> = (0..dict.n_atoms()).filter(|&j| !inside[j]).collect();
    if support.is_empty() || outside.is_empty() {
        return Ok(lambda);
    }
    let pinv = linalg::pinv_full_column_rank(&dict.columns(support))?;
    let coeffs = pinv * dict.columns(&outside);
    let worst = coeffs.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    Ok(lambda - worst)
}

fn check_indices(idx: &[usize], bound: usize) -> Result<()> {
    match idx.iter().find(|&&j| j >= bound) {
        Some(j) => Err(invalid(format!("index {j} out of range (size {bound})"))),
        None => Ok(()),
    }
}
