#![allow(dead_code)]

use groupsparse::Dictionary;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_dictionary(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dictionary {
    Dictionary::normalized(gaussian_matrix(rng, n, m)).unwrap()
}

/// Random orthogonal `n x n` matrix (QR of a Gaussian matrix).
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, n, n).qr().q()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Weighted LASSO `0.5 ||x - D g||^2 + sum_j w_j |g_j|` by cyclic coordinate
/// descent, run until a full sweep moves no coordinate by more than 1e-15.
pub fn lasso_coordinate_descent(x: &DVector<f64>, d: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
    let m = d.ncols();
    let sq: Vec<f64> = d.column_iter().map(|c| c.norm_squared()).collect();
    let mut g: DVector<f64> = DVector::zeros(m);
    let mut r = x.clone();
    for _ in 0..200_000 {
        let mut moved = 0.0_f64;
        for j in 0..m {
            let col = d.column(j);
            let z = col.dot(&r) + sq[j] * g[j];
            let new = if z > w[j] {
                (z - w[j]) / sq[j]
            } else if z < -w[j] {
                (z + w[j]) / sq[j]
            } else {
                0.0
            };
            let delta: f64 = new - g[j];
            if delta != 0.0 {
                r.axpy(-delta, &col, 1.0);
                g[j] = new;
                moved = moved.max(delta.abs());
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    g
}

pub fn linf_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
