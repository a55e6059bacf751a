//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for ranks and pseudo-inverses.
pub const RANK_RTOL: f64 = 1e-10;

/// Largest singular value of `a` (0 for an empty matrix).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    // The smaller Gram matrix has the same top eigenvalue and is cheaper to
    // decompose than a full SVD of a wide or tall matrix.
    let gram = if a.nrows() <= a.ncols() { a * a.transpose() } else { a.transpose() * a };
    let eig = SymmetricEigen::new(gram);
    eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max).max(0.0).sqrt()
}

/// Numerical rank with cutoff `RANK_RTOL * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * smax).count()
}

/// Moore-Penrose pseudo-inverse of a matrix that must have full column rank.
///
/// Returns [`Error::RankDeficient`] carrying the detected rank otherwise.
pub fn pinv_full_column_rank(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = a.ncols();
    if cols == 0 {
        return Ok(DMatrix::zeros(0, a.nrows()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = RANK_RTOL * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff && s > 0.0).count();
    if rank < cols {
        return Err(Error::RankDeficient { rank, columns: cols });
    }
    svd.pseudo_inverse(cutoff)
        .map_err(|e| Error::InvalidInput(format!("pseudo-inverse failed: {e}")))
}

/// Least-squares solution of `a x = b` via SVD, with small singular values
/// treated as zero.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    svd.solve(b, RANK_RTOL * smax.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), b.ncols()))
}

/// `max_{i,j} |a_ij|`.
pub fn max_abs_entry(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn linf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Columns of `a` listed in `idx`, in that order.
pub fn select_columns(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])])
}
