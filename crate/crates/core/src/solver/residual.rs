use nalgebra::DVector;

use crate::dictionary::{Dictionary, NormTag, RegularizerSpec};
use crate::error::{mismatch, Result};

/// Distance of the negative gradient `D^T (x - D code)` to the subdifferential
/// of the penalty at `code`, measured per group in l2 and maximized over
/// groups. Zero exactly at a minimizer.
pub fn optimality_residual(
    x: &DVector<f64>,
    dict: &Dictionary,
    code: &DVector<f64>,
    spec: &RegularizerSpec,
    nonnegative: bool,
) -> Result<f64> {
    if x.len() != dict.n_signal() {
        return Err(mismatch(format!("signal length {} vs {}", x.len(), dict.n_signal())));
    }
    spec.partition().check_len(code.len())?;
    if code.len() != dict.n_atoms() {
        return Err(mismatch(format!("code length {} vs {} atoms", code.len(), dict.n_atoms())));
    }
    let r = x - dict.matrix() * code;
    let g = dict.matrix().tr_mul(&r);
    Ok(residual_from_gradient(&g, code, spec, nonnegative))
}

/// Same as [`optimality_residual`] given the negative gradient directly.
pub(crate) fn residual_from_gradient(
    g: &DVector<f64>,
    code: &DVector<f64>,
    spec: &RegularizerSpec,
    nonneg: bool,
) -> f64 {
    if nonneg && code.iter().any(|&v| v < 0.0) {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for ((group, tag), &w) in spec.partition().groups().iter().zip(spec.tags()).zip(spec.weights()) {
        let (a, b) = match *tag {
            NormTag::L1 => (w, 0.0),
            NormTag::L2 => (0.0, w),
            NormTag::Elastic(beta) => (w * beta, w * (1.0 - beta)),
        };
        let norm = group.iter().map(|&j| code[j] * code[j]).sum::<f64>().sqrt();
        let d2 = if norm > 0.0 && b > 0.0 {
            // Active block with an l2 component: the l2 part is differentiable.
            group
                .iter()
                .map(|&j| {
                    let v = code[j];
                    let e = if v != 0.0 {
                        g[j] - b * v / norm - a * v.signum()
                    } else if nonneg {
                        (g[j] - a).max(0.0)
                    } else {
                        (g[j].abs() - a).max(0.0)
                    };
                    e * e
                })
                .sum::<f64>()
        } else if b > 0.0 {
            // Inactive block: distance to the sum of a box and a ball.
            let inner = group
                .iter()
                .map(|&j| {
                    let s = if nonneg { (g[j] - a).max(0.0) } else { (g[j].abs() - a).max(0.0) };
                    s * s
                })
                .sum::<f64>()
                .sqrt();
            let e = (inner - b).max(0.0);
            e * e
        } else {
            group
                .iter()
                .map(|&j| {
                    let v = code[j];
                    let e = if v != 0.0 {
                        g[j] - a * v.signum()
                    } else if nonneg {
                        (g[j] - a).max(0.0)
                    } else {
                        (g[j].abs() - a).max(0.0)
                    };
                    e * e
                })
                .sum::<f64>()
        };
        worst = worst.max(d2.sqrt());
    }
    worst
}
