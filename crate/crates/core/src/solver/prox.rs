//! Proximal operators of the weighted group penalties and their Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::dictionary::{NormTag, RegularizerSpec};
use crate::error::{invalid, Result};

/// Proximal map of `step * sum_i gamma_i l_i` evaluated at `v`.
pub fn prox_step(v: &DVector<f64>, spec: &RegularizerSpec, step: f64) -> Result<DVector<f64>> {
    check(v, spec, step)?;
    let mut out = v.clone();
    prox_in_place(&mut out, spec, step, false);
    Ok(out)
}

/// Proximal map of the same penalty plus the indicator of the nonnegative
/// orthant.
pub fn prox_step_nonneg(v: &DVector<f64>, spec: &RegularizerSpec, step: f64) -> Result<DVector<f64>> {
    check(v, spec, step)?;
    let mut out = v.clone();
    prox_in_place(&mut out, spec, step, true);
    Ok(out)
}

fn check(v: &DVector<f64>, spec: &RegularizerSpec, step: f64) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!("prox step must be positive, got {step}")));
    }
    spec.partition().check_len(v.len())
}

pub(crate) fn prox_in_place(v: &mut DVector<f64>, spec: &RegularizerSpec, step: f64, nonneg: bool) {
    let p = spec.partition();
    let mut buf = Vec::new();
    for ((group, tag), w) in p.groups().iter().zip(spec.tags()).zip(spec.weights()) {
        let t = step * w;
        match tag {
            NormTag::L1 => {
                for &j in group {
                    v[j] = if nonneg { (v[j] - t).max(0.0) } else { soft(v[j], t) };
                }
            }
            NormTag::L2 | NormTag::Elastic(_) => {
                let (l1_part, l2_part) = match *tag {
                    NormTag::Elastic(beta) => (t * beta, t * (1.0 - beta)),
                    _ => (0.0, t),
                };
                buf.clear();
                buf.extend(group.iter().map(|&j| {
                    if nonneg {
                        (v[j] - l1_part).max(0.0)
                    } else {
                        soft(v[j], l1_part)
                    }
                }));
                let norm = buf.iter().map(|x| x * x).sum::<f64>().sqrt();
                let scale = if norm > l2_part { 1.0 - l2_part / norm } else { 0.0 };
                for (&j, &u) in group.iter().zip(&buf) {
                    v[j] = scale * u;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Jacobian of the prox map at a point, stored as symmetric dense blocks on
/// the coordinates where the map is locally nonzero. Every other coordinate
/// has a zero row and column.
#[derive(Debug, Clone)]
pub struct ProxJacobian {
    blocks: Vec<(Vec<usize>, DMatrix<f64>)>,
    active: Vec<usize>,
}

impl ProxJacobian {
    /// Coordinates with a nonzero Jacobian row, in increasing group order.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Apply to a vector indexed like [`ProxJacobian::active`].
    pub fn apply_compact(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.active.len());
        let mut offset = 0;
        for (idx, block) in &self.blocks {
            let k = idx.len();
            let seg = block * x.rows(offset, k);
            out.rows_mut(offset, k).copy_from(&seg);
            offset += k;
        }
        out
    }

    /// Full `M x M` matrix (for tests).
    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        for (idx, block) in &self.blocks {
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    out[(i, j)] = block[(a, b)];
                }
            }
        }
        out
    }
}

/// Jacobian of the (optionally nonnegative) prox map at `v`.
///
/// At kinks the one-sided derivative of the inactive branch (zero) is used.
pub fn prox_jacobian(v: &DVector<f64>, spec: &RegularizerSpec, step: f64, nonneg: bool) -> Result<ProxJacobian> {
    check(v, spec, step)?;
    let p = spec.partition();
    let mut blocks = Vec::new();
    let mut active = Vec::new();
    for ((group, tag), w) in p.groups().iter().zip(spec.tags()).zip(spec.weights()) {
        let t = step * w;
        match tag {
            NormTag::L1 => {
                for &j in group {
                    let on = if nonneg { v[j] > t } else { v[j].abs() > t };
                    if on {
                        blocks.push((vec![j], DMatrix::from_element(1, 1, 1.0)));
                        active.push(j);
                    }
                }
            }
            NormTag::L2 | NormTag::Elastic(_) => {
                let (l1_part, l2_part) = match *tag {
                    NormTag::Elastic(beta) => (t * beta, t * (1.0 - beta)),
                    _ => (0.0, t),
                };
                let mut idx = Vec::new();
                let mut u = Vec::new();
                for &j in group {
                    let val = if nonneg { (v[j] - l1_part).max(0.0) } else { soft(v[j], l1_part) };
                    if val != 0.0 {
                        idx.push(j);
                        u.push(val);
                    }
                }
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= l2_part || idx.is_empty() {
                    continue;
                }
                let k = idx.len();
                let u = DVector::from_vec(u);
                let mut block = &u * u.transpose() * (l2_part / norm.powi(3));
                for d in 0..k {
                    block[(d, d)] += 1.0 - l2_part / norm;
                }
                active.extend_from_slice(&idx);
                blocks.push((idx, block));
            }
        }
    }
    Ok(ProxJacobian { blocks, active })
}
