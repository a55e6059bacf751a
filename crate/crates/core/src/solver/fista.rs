use nalgebra::{DMatrix, DVector};

use super::prox::prox_in_place;
use super::residual::residual_from_gradient;
use crate::dictionary::{is_group_full, Dictionary, RegularizerSpec, SparseCode};
use crate::error::{invalid, mismatch, Result};
use crate::linalg;

/// Iteration controls for [`solve_gbp`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Stop once, for three consecutive check windows, the relative objective
    /// decrease stays below this while the residual no longer improves.
    pub rel_tol: f64,
    /// Converged when the optimality residual is below
    /// `residual_tol * (1 + ||x||_2)`.
    pub residual_tol: f64,
    pub acceleration: bool,
    pub nonnegative: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iter: 5000,
            rel_tol: 1e-9,
            residual_tol: 1e-7,
            acceleration: true,
            nonnegative: false,
        }
    }
}

impl SolveOptions {
    pub fn nonnegative(mut self) -> Self {
        self.nonnegative = true;
        self
    }

    pub fn with_residual_tol(mut self, tol: f64) -> Self {
        self.residual_tol = tol;
        self
    }

    pub fn with_max_iter(mut self, n: usize) -> Self {
        self.max_iter = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub code: SparseCode,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    /// Support is a union of whole L2 groups (plus any L1 / elastic entries).
    pub group_full: bool,
}

/// Coefficients below this fraction of `max(1, ||code||_inf)` are set to zero
/// after the iterations finish.
pub const SNAP_RTOL: f64 = 1e-8;

const CHECK_EVERY: usize = 10;

/// Reusable solver for a fixed dictionary and regularizer.
#[derive(Debug, Clone)]
pub struct GbpSolver {
    dict: Dictionary,
    spec: RegularizerSpec,
    opts: SolveOptions,
    step: f64,
    // Used instead of two passes over D when it is cheaper.
    gram: Option<DMatrix<f64>>,
}

impl GbpSolver {
    pub fn new(dict: &Dictionary, spec: &RegularizerSpec, opts: SolveOptions) -> Result<Self> {
        if spec.n_atoms() != dict.n_atoms() {
            return Err(mismatch(format!(
                "regularizer covers {} atoms, dictionary has {}",
                spec.n_atoms(),
                dict.n_atoms()
            )));
        }
        if opts.max_iter == 0 {
            return Err(invalid("max_iter must be positive"));
        }
        let smax = linalg::spectral_norm(dict.matrix());
        let (n, m) = (dict.n_signal(), dict.n_atoms());
        let gram = if m < 2 * n { Some(dict.gram()) } else { None };
        Ok(GbpSolver { dict: dict.clone(), spec: spec.clone(), opts, step: 1.0 / (smax * smax), gram })
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn spec(&self) -> &RegularizerSpec {
        &self.spec
    }

    pub fn options(&self) -> &SolveOptions {
        &self.opts
    }

    /// Gradient step size `1 / sigma_max(D)^2`.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn solve(&self, x: &DVector<f64>) -> Result<SolveResult> {
        self.solve_from(x, &DVector::zeros(self.dict.n_atoms()))
    }

    /// Runs the iterations starting at `init`.
    pub fn solve_from(&self, x: &DVector<f64>, init: &DVector<f64>) -> Result<SolveResult> {
        let (n, m) = (self.dict.n_signal(), self.dict.n_atoms());
        if x.len() != n {
            return Err(mismatch(format!("signal length {} vs {n}", x.len())));
        }
        if init.len() != m {
            return Err(mismatch(format!("initial code length {} vs {m}", init.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("signal contains non-finite entries"));
        }
        let d = self.dict.matrix();
        let nonneg = self.opts.nonnegative;
        let tol = self.opts.residual_tol * (1.0 + x.norm());
        let dtx = d.tr_mul(x);

        let mut cur = init.clone();
        if nonneg {
            cur.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mut prev = cur.clone();
        let mut y = cur.clone();
        let mut grad = DVector::zeros(m);
        let mut dy = DVector::zeros(n);
        let mut t = 1.0_f64;

        let (mut residual, mut objective) = self.diagnose(x, &dtx, &cur, &mut dy, &mut grad);
        let mut iterations = 0;
        let mut last_obj = objective;
        let mut last_residual = residual;
        let mut stalls = 0;
        while residual > tol && iterations < self.opts.max_iter {
            iterations += 1;
            self.gradient(&dtx, &y, &mut dy, &mut grad);
            std::mem::swap(&mut prev, &mut cur);
            cur.copy_from(&y);
            cur.axpy(-self.step, &grad, 1.0);
            prox_in_place(&mut cur, &self.spec, self.step, nonneg);

            if self.opts.acceleration {
                // Gradient-based adaptive restart keeps the iterates monotone
                // enough for the stagnation test.
                let restart = (&y - &cur).dot(&(&cur - &prev)) > 0.0;
                if restart {
                    t = 1.0;
                    y.copy_from(&cur);
                } else {
                    let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                    let beta = (t - 1.0) / t_next;
                    y.copy_from(&cur);
                    y.axpy(beta, &cur, 1.0);
                    y.axpy(-beta, &prev, 1.0);
                    t = t_next;
                }
            } else {
                y.copy_from(&cur);
            }

            if iterations % CHECK_EVERY == 0 || iterations == self.opts.max_iter {
                (residual, objective) = self.diagnose(x, &dtx, &cur, &mut dy, &mut grad);
                let decrease = (last_obj - objective) / last_obj.abs().max(1.0);
                let stuck = decrease.abs() < self.opts.rel_tol && residual >= 0.99 * last_residual;
                stalls = if stuck { stalls + 1 } else { 0 };
                last_obj = objective;
                last_residual = residual;
                if stalls >= 3 {
                    break;
                }
            }
        }

        let cap = SNAP_RTOL * linalg::linf(&cur).max(1.0);
        cur.iter_mut().for_each(|v| {
            if v.abs() < cap {
                *v = 0.0
            }
        });
        let (residual, objective) = self.diagnose(x, &dtx, &cur, &mut dy, &mut grad);
        let code = SparseCode::new(cur, self.spec.partition())?;
        let group_full = is_group_full(&code.support, &self.spec)?;
        Ok(SolveResult { code, objective, iterations, converged: residual <= tol, residual, group_full })
    }

    // grad = D^T (D y - x)
    fn gradient(&self, dtx: &DVector<f64>, y: &DVector<f64>, dy: &mut DVector<f64>, grad: &mut DVector<f64>) {
        match &self.gram {
            Some(g) => grad.gemv(1.0, g, y, 0.0),
            None => {
                dy.gemv(1.0, self.dict.matrix(), y, 0.0);
                grad.gemv_tr(1.0, self.dict.matrix(), dy, 0.0);
            }
        }
        *grad -= dtx;
    }

    fn diagnose(
        &self,
        x: &DVector<f64>,
        dtx: &DVector<f64>,
        code: &DVector<f64>,
        dy: &mut DVector<f64>,
        grad: &mut DVector<f64>,
    ) -> (f64, f64) {
        dy.gemv(1.0, self.dict.matrix(), code, 0.0);
        let fit = 0.5 * (&*dy - x).norm_squared();
        self.gradient(dtx, code, dy, grad);
        let neg = -&*grad;
        let residual = residual_from_gradient(&neg, code, &self.spec, self.opts.nonnegative);
        (residual, fit + self.spec.penalty(code))
    }
}

/// Minimizes `0.5 ||x - D code||^2 + sum_i gamma_i l_i(code_i)` (optionally
/// over nonnegative codes) with accelerated proximal gradient.
pub fn solve_gbp(
    x: &DVector<f64>,
    dict: &Dictionary,
    spec: &RegularizerSpec,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    GbpSolver::new(dict, spec, opts.clone())?.solve(x)
}
