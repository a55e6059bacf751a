//! Dictionaries, group partitions, regularizer specifications and the
//! structural quantities the stability certificates are built from.

mod metrics;
mod partition;

pub use metrics::{
    characteristic_vector, erc, is_group_full, local_amplitude, local_l0, max_stripe,
    mutual_coherence, stripe_norm, stripe_norm_of_support, support_of, Coherence, Neighborhoods,
};
pub use partition::GroupPartition;

pub(crate) use metrics::characteristic_of_support;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, mismatch, Result};

/// Entries with magnitude at or below this are treated as zero when deciding
/// atom supports and non-orthogonality.
pub const ZERO_TOL: f64 = 1e-12;

/// An `N x M` dictionary whose columns are the atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    matrix: DMatrix<f64>,
    unit_normed: bool,
    atom_supports: Vec<Vec<usize>>,
}

impl Dictionary {
    /// Wraps a matrix. Entries must be finite and no atom may be zero.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(invalid("dictionary must have at least one row and one atom"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("dictionary contains non-finite entries"));
        }
        let mut unit_normed = true;
        let mut atom_supports = Vec::with_capacity(matrix.ncols());
        for (i, col) in matrix.column_iter().enumerate() {
            let norm = col.norm();
            if norm <= ZERO_TOL {
                return Err(invalid(format!("atom {i} is zero")));
            }
            if (norm - 1.0).abs() > ZERO_TOL {
                unit_normed = false;
            }
            atom_supports.push(
                col.iter().enumerate().filter(|(_, v)| v.abs() > ZERO_TOL).map(|(r, _)| r).collect(),
            );
        }
        Ok(Dictionary { matrix, unit_normed, atom_supports })
    }

    /// Rescales every atom to unit norm first.
    pub fn normalized(mut matrix: DMatrix<f64>) -> Result<Self> {
        for (i, mut col) in matrix.column_iter_mut().enumerate() {
            let norm = col.norm();
            if !(norm > ZERO_TOL) {
                return Err(invalid(format!("atom {i} is zero")));
            }
            col /= norm;
        }
        Self::new(matrix)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Signal dimension `N`.
    pub fn n_signal(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of atoms `M`.
    pub fn n_atoms(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_unit_normed(&self) -> bool {
        self.unit_normed
    }

    /// Row indices where each atom is nonzero.
    pub fn atom_supports(&self) -> &[Vec<usize>] {
        &self.atom_supports
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.matrix.transpose() * &self.matrix
    }

    /// `D * code`.
    pub fn synthesize(&self, code: &DVector<f64>) -> Result<DVector<f64>> {
        if code.len() != self.n_atoms() {
            return Err(mismatch(format!("code length {} vs {} atoms", code.len(), self.n_atoms())));
        }
        Ok(&self.matrix * code)
    }

    /// Columns listed in `idx`.
    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        crate::linalg::select_columns(&self.matrix, idx)
    }
}

/// Penalty applied to one group of coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormTag {
    /// Sum of absolute values.
    L1,
    /// Euclidean norm of the group.
    L2,
    /// `beta * l1 + (1 - beta) * l2`, with `0 < beta < 1`.
    Elastic(f64),
}

impl NormTag {
    /// Contribution of this tag to the constant `lambda` (the smallest l1
    /// weight among all groups).
    pub fn lambda_contribution(&self) -> f64 {
        match *self {
            NormTag::L1 | NormTag::L2 => 1.0,
            NormTag::Elastic(beta) => beta,
        }
    }

    /// Unweighted penalty of `values`.
    pub fn penalty<'a>(&self, values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
        let l1 = || values.clone().map(|v| v.abs()).sum::<f64>();
        let l2 = || values.clone().map(|v| v * v).sum::<f64>().sqrt();
        match *self {
            NormTag::L1 => l1(),
            NormTag::L2 => l2(),
            NormTag::Elastic(beta) => beta * l1() + (1.0 - beta) * l2(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let NormTag::Elastic(beta) = *self {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(invalid(format!("elastic weight must lie in (0, 1), got {beta}")));
            }
        }
        Ok(())
    }
}

/// A partition together with one norm tag and one positive weight per group.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerSpec {
    partition: GroupPartition,
    tags: Vec<NormTag>,
    weights: Vec<f64>,
}

impl RegularizerSpec {
    pub fn new(partition: GroupPartition, tags: Vec<NormTag>, weights: Vec<f64>) -> Result<Self> {
        let g = partition.n_groups();
        if tags.len() != g || weights.len() != g {
            return Err(mismatch(format!(
                "{g} groups but {} tags and {} weights",
                tags.len(),
                weights.len()
            )));
        }
        for t in &tags {
            t.validate()?;
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(invalid(format!("group weights must be positive and finite, got {w}")));
        }
        Ok(RegularizerSpec { partition, tags, weights })
    }

    /// Same tag and weight for every group.
    pub fn uniform(partition: GroupPartition, tag: NormTag, weight: f64) -> Result<Self> {
        let g = partition.n_groups();
        Self::new(partition, vec![tag; g], vec![weight; g])
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn tags(&self) -> &[NormTag] {
        &self.tags
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_atoms(&self) -> usize {
        self.partition.n_atoms()
    }

    pub fn gamma_min(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn gamma_max(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }

    /// `min(1, beta_1, ..., beta_k)` over the elastic groups.
    pub fn lambda(&self) -> f64 {
        self.tags.iter().map(NormTag::lambda_contribution).fold(1.0, f64::min)
    }

    /// `lambda * gamma_min / gamma_max`.
    pub fn theta(&self) -> f64 {
        self.lambda() * self.gamma_min() / self.gamma_max()
    }

    /// Copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.partition.clone(),
            self.tags.clone(),
            self.weights.iter().map(|w| w * factor).collect(),
        )
    }

    /// `sum_i gamma_i * l_i(values restricted to group i)`.
    pub fn penalty(&self, values: &DVector<f64>) -> f64 {
        self.partition
            .groups()
            .iter()
            .zip(&self.tags)
            .zip(&self.weights)
            .map(|((g, tag), w)| w * tag.penalty(g.iter().map(|&j| &values[j])))
            .sum()
    }

    /// `0.5 * ||x - D code||^2 + penalty(code)`.
    pub fn objective(&self, x: &DVector<f64>, dict: &Dictionary, code: &DVector<f64>) -> f64 {
        let r = x - dict.matrix() * code;
        0.5 * r.norm_squared() + self.penalty(code)
    }
}

/// A coefficient vector with its support and per-group Euclidean norms.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub values: DVector<f64>,
    pub support: Vec<usize>,
    pub group_norms: DVector<f64>,
}

impl SparseCode {
    pub fn new(values: DVector<f64>, partition: &GroupPartition) -> Result<Self> {
        if values.len() != partition.n_atoms() {
            return Err(mismatch(format!(
                "code length {} vs partition over {} atoms",
                values.len(),
                partition.n_atoms()
            )));
        }
        let support = support_of(&values);
        let group_norms = partition.group_norms(&values);
        Ok(SparseCode { values, support, group_norms })
    }

    pub fn zeros(partition: &GroupPartition) -> Self {
        SparseCode {
            values: DVector::zeros(partition.n_atoms()),
            support: Vec::new(),
            group_norms: DVector::zeros(partition.n_groups()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices of groups with a nonzero coefficient.
    pub fn active_groups(&self) -> Vec<usize> {
        self.group_norms.iter().enumerate().filter(|(_, n)| **n > 0.0).map(|(g, _)| g).collect()
    }
}
