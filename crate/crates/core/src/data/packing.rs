use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dictionary::{Dictionary, GroupPartition};
use crate::error::{invalid, mismatch, Result};

/// Each round aims for this fraction of the current coherence.
const SHRINK: f64 = 0.9;
/// Rounds without improvement before the target floor is relaxed.
const PATIENCE: usize = 20;
const FLOOR_RELAX: f64 = 1.05;

#[derive(Debug, Clone)]
pub struct Packing {
    pub dictionary: Dictionary,
    /// Absolute mutual coherence of `dictionary`.
    pub mu: f64,
    /// Lower bound on the coherence of any `n x m` unit-norm frame.
    pub welch_bound: f64,
    pub rounds: usize,
}

/// `sqrt((m - n) / (n (m - 1)))`, or 0 when `m <= n`.
pub fn welch_bound(n: usize, m: usize) -> f64 {
    if m <= n || n == 0 {
        return 0.0;
    }
    (((m - n) as f64) / ((n * (m - 1)) as f64)).sqrt()
}

fn off_diagonal_max(g: &DMatrix<f64>) -> f64 {
    let mut mu = 0.0_f64;
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            if i != j {
                mu = mu.max(g[(i, j)].abs());
            }
        }
    }
    mu
}

fn normalize_columns(d: &mut DMatrix<f64>) {
    for mut col in d.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
}

/// Searches for an `n x m` unit-norm dictionary with small mutual coherence by
/// alternating projection on the Gram matrix: clip off-diagonal entries to a
/// shrinking target, zero the entries between atoms of the same group,
/// truncate to rank `n`, and renormalize. Returns the best dictionary seen,
/// even if `target_mu` was not reached.
pub fn build_low_coherence_dictionary(
    n: usize,
    m: usize,
    partition: Option<&GroupPartition>,
    seed: u64,
    target_mu: Option<f64>,
    max_rounds: usize,
) -> Result<Packing> {
    if n == 0 || m == 0 {
        return Err(invalid("dictionary dimensions must be positive"));
    }
    let mut group_of = vec![usize::MAX; m];
    if let Some(p) = partition {
        if p.n_atoms() != m {
            return Err(mismatch(format!("partition covers {} atoms, expected {m}", p.n_atoms())));
        }
        for (g, atoms) in p.groups().iter().enumerate() {
            if atoms.len() > n {
                return Err(invalid(format!("group {g} has {} atoms, more than the dimension {n}", atoms.len())));
            }
            for &a in atoms {
                group_of[a] = g;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let welch = welch_bound(n, m);

    if m <= n {
        let q = d.qr().q();
        let dictionary = Dictionary::normalized(q)?;
        let mu = off_diagonal_max(&dictionary.gram());
        return Ok(Packing { dictionary, mu, welch_bound: welch, rounds: 0 });
    }

    normalize_columns(&mut d);
    // The target only decides when to stop; clipping to it directly would
    // settle just above it.
    let mut floor = welch;
    let mut best = d.clone();
    let mut best_mu = f64::INFINITY;
    let mut since_best = 0;
    let mut rounds = 0;
    loop {
        let mut g = d.transpose() * &d;
        let mu = off_diagonal_max(&g);
        if mu < best_mu {
            best_mu = mu;
            best.copy_from(&d);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= PATIENCE {
                floor *= FLOOR_RELAX;
                since_best = 0;
            }
        }
        if rounds >= max_rounds || target_mu.is_some_and(|t| best_mu <= t) {
            break;
        }
        rounds += 1;

        let target = (SHRINK * mu).max(floor);
        for j in 0..m {
            for i in 0..m {
                g[(i, j)] = if i == j {
                    1.0
                } else if group_of[i] != usize::MAX && group_of[i] == group_of[j] {
                    0.0
                } else {
                    g[(i, j)].clamp(-target, target)
                };
            }
        }
        let eig = SymmetricEigen::new(g);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (row, &k) in order.iter().take(n).enumerate() {
            let scale = eig.eigenvalues[k].max(0.0).sqrt();
            for j in 0..m {
                d[(row, j)] = scale * eig.eigenvectors[(j, k)];
            }
        }
        // A column can vanish if the truncated spectrum misses it entirely.
        for (j, mut col) in d.column_iter_mut().enumerate() {
            if col.norm() <= 1e-12 {
                col.copy_from(&best.column(j));
            }
        }
        normalize_columns(&mut d);
    }
    let dictionary = Dictionary::normalized(best)?;
    Ok(Packing { dictionary, mu: best_mu, welch_bound: welch, rounds })
}
