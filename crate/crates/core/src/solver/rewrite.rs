//! Rewriting a layered problem (or any block-structured system with skip
//! connections) as one normalized single-layer problem.

use nalgebra::{DMatrix, DVector};

use super::layered::LayeredProblem;
use crate::dictionary::{mutual_coherence, Dictionary, GroupPartition, NormTag, RegularizerSpec};
use crate::error::{invalid, mismatch, Error, Result};
use crate::linalg;

const SCALE_RTOL: f64 = 1e-12;

/// Block matrix with one regularizer per column block. Missing blocks are
/// zero.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    row_sizes: Vec<usize>,
    specs: Vec<RegularizerSpec>,
    blocks: Vec<(usize, usize, DMatrix<f64>)>,
}

impl BlockSystem {
    /// `row_sizes[r]` rows in block row `r`; column block `c` has
    /// `specs[c].n_atoms()` columns.
    pub fn new(row_sizes: Vec<usize>, specs: Vec<RegularizerSpec>) -> Self {
        BlockSystem { row_sizes, specs, blocks: Vec::new() }
    }

    pub fn set_block(&mut self, row: usize, col: usize, block: DMatrix<f64>) -> Result<()> {
        if row >= self.row_sizes.len() || col >= self.specs.len() {
            return Err(invalid(format!("block ({row}, {col}) outside the block grid")));
        }
        if block.nrows() != self.row_sizes[row] || block.ncols() != self.specs[col].n_atoms() {
            return Err(mismatch(format!(
                "block ({row}, {col}) is {}x{}, expected {}x{}",
                block.nrows(),
                block.ncols(),
                self.row_sizes[row],
                self.specs[col].n_atoms()
            )));
        }
        self.blocks.retain(|(r, c, _)| !(*r == row && *c == col));
        self.blocks.push((row, col, block));
        Ok(())
    }

    fn assemble(&self) -> DMatrix<f64> {
        let rows: usize = self.row_sizes.iter().sum();
        let cols: usize = self.specs.iter().map(|s| s.n_atoms()).sum();
        let row_off = offsets(&self.row_sizes);
        let col_off = offsets(&self.specs.iter().map(|s| s.n_atoms()).collect::<Vec<_>>());
        let mut a = DMatrix::zeros(rows, cols);
        for (r, c, b) in &self.blocks {
            a.view_mut((row_off[*r], col_off[*c]), (b.nrows(), b.ncols())).copy_from(b);
        }
        a
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for s in sizes {
        out.push(acc);
        acc += s;
    }
    out
}

/// The normalized single-layer problem and the maps back to the original
/// variables.
#[derive(Debug, Clone)]
pub struct RewrittenProblem {
    /// Unit-normed dictionary of the rewritten problem.
    pub dictionary: Dictionary,
    /// Regularizer of the rewritten problem (weights absorb the scaling).
    pub spec: RegularizerSpec,
    /// Original variable = `scale_map .* rewritten variable`.
    pub scale_map: DVector<f64>,
    /// Assembled block matrix before normalization.
    pub original_matrix: DMatrix<f64>,
    /// Regularizer of the unnormalized block problem.
    pub original_spec: RegularizerSpec,
    row_sizes: Vec<usize>,
    col_sizes: Vec<usize>,
}

impl RewrittenProblem {
    /// Stacks the per-block-row signals into the rewritten signal.
    pub fn signal(&self, blocks: &[DVector<f64>]) -> Result<DVector<f64>> {
        if blocks.len() != self.row_sizes.len() {
            return Err(mismatch(format!("{} signal blocks for {} block rows", blocks.len(), self.row_sizes.len())));
        }
        let mut out = Vec::with_capacity(self.dictionary.n_signal());
        for (b, &n) in blocks.iter().zip(&self.row_sizes) {
            if b.len() != n {
                return Err(mismatch(format!("signal block of length {} where {n} expected", b.len())));
            }
            out.extend(b.iter());
        }
        Ok(DVector::from_vec(out))
    }

    /// Layered signal: `x` on the first block row, zeros elsewhere.
    pub fn layered_signal(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut blocks = vec![x.clone()];
        blocks.extend(self.row_sizes[1..].iter().map(|&n| DVector::zeros(n)));
        self.signal(&blocks)
    }

    /// Original-variable blocks of a rewritten solution.
    pub fn recover_original(&self, rewritten: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if rewritten.len() != self.scale_map.len() {
            return Err(mismatch(format!("solution length {} vs {}", rewritten.len(), self.scale_map.len())));
        }
        let full = rewritten.component_mul(&self.scale_map);
        let mut out = Vec::with_capacity(self.col_sizes.len());
        let mut off = 0;
        for &c in &self.col_sizes {
            out.push(full.rows(off, c).into_owned());
            off += c;
        }
        Ok(out)
    }

    /// Objective of the unnormalized block problem at original variables.
    pub fn original_objective(&self, signal: &DVector<f64>, original: &DVector<f64>) -> f64 {
        let r = signal - &self.original_matrix * original;
        0.5 * r.norm_squared() + self.original_spec.penalty(original)
    }

    /// Objective of the rewritten problem at rewritten variables.
    pub fn rewritten_objective(&self, signal: &DVector<f64>, rewritten: &DVector<f64>) -> f64 {
        self.spec.objective(signal, &self.dictionary, rewritten)
    }
}

/// Normalizes the columns of a block system.
///
/// Every L2 or elastic group must have atoms of one common norm, since the
/// penalty is only invariant under a common rescaling. L1 groups with mixed
/// norms are split into sub-groups of equal norm, which leaves the penalty
/// unchanged because l1 is separable.
pub fn rewrite_block_system(system: &BlockSystem) -> Result<RewrittenProblem> {
    let a = system.assemble();
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidStructure(format!("column {j} of the block system is zero")));
    }
    let mut groups = Vec::new();
    let mut tags = Vec::new();
    let mut weights = Vec::new();
    let mut scaled_weights = Vec::new();
    let mut offset = 0;
    for (b, spec) in system.specs.iter().enumerate() {
        let p = spec.partition();
        for ((group, tag), &w) in p.groups().iter().zip(spec.tags()).zip(spec.weights()) {
            let members: Vec<usize> = group.iter().map(|j| j + offset).collect();
            let mut classes: Vec<(f64, Vec<usize>)> = Vec::new();
            for &j in &members {
                match classes.iter_mut().find(|(n, _)| (n - norms[j]).abs() <= SCALE_RTOL * n.max(1.0)) {
                    Some((_, v)) => v.push(j),
                    None => classes.push((norms[j], vec![j])),
                }
            }
            if classes.len() > 1 && *tag != NormTag::L1 {
                return Err(Error::InvalidStructure(format!(
                    "column block {b}: a {tag:?} group mixes atoms of different norms"
                )));
            }
            for (n, idx) in classes {
                groups.push(idx);
                tags.push(*tag);
                weights.push(w);
                scaled_weights.push(w / n);
            }
        }
        offset += spec.n_atoms();
    }
    let m = a.ncols();
    let partition = GroupPartition::new(groups, m)?;
    let original_spec = RegularizerSpec::new(partition.clone(), tags.clone(), weights)?;
    let spec = RegularizerSpec::new(partition, tags, scaled_weights)?;
    let mut normalized = a.clone();
    for (mut col, n) in normalized.column_iter_mut().zip(&norms) {
        col /= *n;
    }
    let scale_map = DVector::from_iterator(m, norms.iter().map(|n| 1.0 / n));
    Ok(RewrittenProblem {
        dictionary: Dictionary::new(normalized)?,
        spec,
        scale_map,
        original_matrix: a,
        original_spec,
        row_sizes: system.row_sizes.clone(),
        col_sizes: system.specs.iter().map(|s| s.n_atoms()).collect(),
    })
}

/// Rewrites a layered problem as the single-layer problem over all codes at
/// once: block row 1 holds `D_1`, block row `j + 1` holds `-I` under block
/// `j` and `D_{j+1}` under block `j + 1`.
pub fn rewrite_single_layer(problem: &LayeredProblem) -> Result<RewrittenProblem> {
    let k = problem.depth();
    let mut rows = vec![problem.signal_len()];
    rows.extend((0..k - 1).map(|j| problem.dictionary(j).n_atoms()));
    let specs = problem.layers().iter().map(|(_, s)| s.clone()).collect();
    let mut sys = BlockSystem::new(rows, specs);
    for j in 0..k {
        sys.set_block(j, j, problem.dictionary(j).matrix().clone())?;
        if j + 1 < k {
            let m = problem.dictionary(j).n_atoms();
            sys.set_block(j + 1, j, -DMatrix::<f64>::identity(m, m))?;
        }
    }
    rewrite_block_system(&sys)
}

/// Closed-form coherence of the rewritten dictionary for unit-normed layers:
/// the largest of `mu(D_j) / 2` for `j < K`, `mu(D_K)`, `||D_j||_max / 2` for
/// `1 < j < K`, and `||D_K||_max / sqrt(2)` (the last layer's columns are not
/// rescaled, so its cross term is larger by `sqrt(2)`).
pub fn rewritten_coherence_closed_form(problem: &LayeredProblem) -> Result<f64> {
    let k = problem.depth();
    let mut best = 0.0_f64;
    for j in 0..k {
        let d = problem.dictionary(j);
        if !d.is_unit_normed() {
            return Err(invalid(format!("layer {j} is not unit-normed")));
        }
        let mu = if d.n_atoms() >= 2 { mutual_coherence(d)?.absolute } else { 0.0 };
        if j + 1 < k {
            best = best.max(0.5 * mu);
        } else {
            best = best.max(mu);
        }
        if j > 0 {
            let cross = linalg::max_abs_entry(d.matrix());
            let factor = if j + 1 < k { 0.5 } else { std::f64::consts::FRAC_1_SQRT_2 };
            best = best.max(factor * cross);
        }
    }
    Ok(best)
}
