//! Gradient-sign attacks against the solve-then-classify pipeline.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::classify::{
    gap_regularizer, loss_with_gradients, pool_backward, pool_groups, predict_and_margin, LinearClassifier, LossKind,
    Prediction,
};
use crate::error::{invalid, mismatch, Error, Result};
use crate::solver::{prox_in_place, prox_jacobian, GbpSolver, SolveResult};
use crate::NormTag;

/// Unrolled proximal-gradient steps used by [`input_gradient`].
pub const DEFAULT_UNROLL: usize = 300;

/// What the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// The code itself.
    Full,
    /// The Euclidean norm of each group of the code.
    Pooled,
}

/// Gap regularizer added to the attacked loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapTerm {
    pub weight: f64,
    pub threshold: f64,
}

/// Sparse coding followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct Pipeline {
    solver: GbpSolver,
    classifier: LinearClassifier,
    mode: FeatureMode,
    loss: LossKind,
    gap: Option<GapTerm>,
    unroll: usize,
}

impl Pipeline {
    pub fn new(solver: GbpSolver, classifier: LinearClassifier, mode: FeatureMode, loss: LossKind) -> Result<Self> {
        let features = match mode {
            FeatureMode::Full => solver.dictionary().n_atoms(),
            FeatureMode::Pooled => solver.spec().partition().n_groups(),
        };
        if classifier.n_features() != features {
            return Err(mismatch(format!(
                "classifier expects {} features, the pipeline produces {features}",
                classifier.n_features()
            )));
        }
        Ok(Pipeline { solver, classifier, mode, loss, gap: None, unroll: DEFAULT_UNROLL })
    }

    pub fn with_gap(mut self, gap: GapTerm) -> Self {
        self.gap = Some(gap);
        self
    }

    pub fn with_unroll(mut self, steps: usize) -> Self {
        self.unroll = steps;
        self
    }

    pub fn solver(&self) -> &GbpSolver {
        &self.solver
    }

    pub fn classifier(&self) -> &LinearClassifier {
        &self.classifier
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn gap(&self) -> Option<GapTerm> {
        self.gap
    }

    pub fn features(&self, code: &DVector<f64>) -> Result<DVector<f64>> {
        match self.mode {
            FeatureMode::Full => Ok(code.clone()),
            FeatureMode::Pooled => pool_groups(code, self.solver.spec().partition()),
        }
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<SolveResult> {
        self.solver.solve(x)
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<Prediction> {
        let code = self.encode(x)?;
        predict_and_margin(&self.classifier, &self.features(&code.code.values)?)
    }

    /// Loss of a code: classification loss plus the weighted gap term when
    /// `with_gap` and a gap term is configured.
    pub fn code_loss(&self, code: &DVector<f64>, label: usize, with_gap: bool) -> Result<(f64, DVector<f64>)> {
        let lg = loss_with_gradients(&self.classifier, &self.features(code)?, label, self.loss)?;
        let partition = self.solver.spec().partition();
        let mut grad = match self.mode {
            FeatureMode::Full => lg.grad_features,
            FeatureMode::Pooled => pool_backward(code, partition, &lg.grad_features),
        };
        let mut loss = lg.loss;
        if let (true, Some(gap)) = (with_gap, self.gap) {
            let g = gap_regularizer(std::slice::from_ref(code), partition, gap.threshold)?;
            loss += gap.weight * g.value;
            grad.axpy(gap.weight, &g.grads[0], 1.0);
        }
        Ok((loss, grad))
    }

    /// Total loss at the input `x` (solves to convergence).
    pub fn loss(&self, x: &DVector<f64>, label: usize, with_gap: bool) -> Result<f64> {
        let code = self.encode(x)?;
        Ok(self.code_loss(&code.code.values, label, with_gap)?.0)
    }

    /// Distance of the prox input at `code` from the nearest threshold where
    /// the pipeline stops being differentiable.
    pub fn smoothness_gap(&self, x: &DVector<f64>, code: &DVector<f64>) -> f64 {
        let d = self.solver.dictionary().matrix();
        let step = self.solver.step();
        let v = code + (d.tr_mul(&(x - d * code))) * step;
        let spec = self.solver.spec();
        let nonneg = self.solver.options().nonnegative;
        let mut gap = f64::INFINITY;
        for ((group, tag), w) in spec.partition().groups().iter().zip(spec.tags()).zip(spec.weights()) {
            let t = step * w;
            let (l1_part, l2_part) = match *tag {
                NormTag::L1 => (t, 0.0),
                NormTag::L2 => (0.0, t),
                NormTag::Elastic(beta) => (t * beta, t * (1.0 - beta)),
            };
            let mut sq = 0.0;
            for &j in group {
                let a = if nonneg { v[j] } else { v[j].abs() };
                if l1_part > 0.0 {
                    gap = gap.min((a - l1_part).abs());
                }
                let u = (a - l1_part).max(0.0);
                sq += u * u;
            }
            if l2_part > 0.0 {
                gap = gap.min((sq.sqrt() - l2_part).abs());
            }
        }
        gap
    }
}

#[derive(Debug, Clone)]
pub struct InputGradient {
    pub gradient: DVector<f64>,
    pub loss: f64,
    /// The solve feeding the unrolled steps reached its tolerance.
    pub converged: bool,
    pub solve: SolveResult,
}

/// Gradient of the pipeline loss with respect to the input signal.
pub fn input_gradient(pipeline: &Pipeline, x: &DVector<f64>, label: usize) -> Result<InputGradient> {
    let solve = pipeline.solver.solve(x)?;
    gradient_after_solve(pipeline, x, label, solve, true)
}

/// [`input_gradient`] with the solver started from `init`.
pub fn input_gradient_from(
    pipeline: &Pipeline,
    x: &DVector<f64>,
    label: usize,
    init: &DVector<f64>,
    with_gap: bool,
) -> Result<InputGradient> {
    let solve = pipeline.solver.solve_from(x, init)?;
    gradient_after_solve(pipeline, x, label, solve, with_gap)
}

// Runs `unroll` proximal-gradient steps from the solution, then
// differentiates them in reverse. The starting point is held constant.
fn gradient_after_solve(
    pipeline: &Pipeline,
    x: &DVector<f64>,
    label: usize,
    solve: SolveResult,
    with_gap: bool,
) -> Result<InputGradient> {
    let solver = &pipeline.solver;
    let d = solver.dictionary().matrix();
    let spec = solver.spec();
    let step = solver.step();
    let nonneg = solver.options().nonnegative;
    let dtx = d.tr_mul(x);

    let mut z = solve.code.values.clone();
    let mut inputs = Vec::with_capacity(pipeline.unroll);
    for _ in 0..pipeline.unroll {
        let grad = d.tr_mul(&(d * &z)) - &dtx;
        let v = &z - grad * step;
        z = v.clone();
        prox_in_place(&mut z, spec, step, nonneg);
        inputs.push(v);
    }
    let (loss, mut a) = pipeline.code_loss(&z, label, with_gap)?;

    let mut gx = DVector::zeros(x.len());
    for v in inputs.iter().rev() {
        let jac = prox_jacobian(v, spec, step, nonneg)?;
        let active = jac.active();
        if active.is_empty() {
            a.fill(0.0);
            break;
        }
        let a_active = DVector::from_iterator(active.len(), active.iter().map(|&j| a[j]));
        let b = jac.apply_compact(&a_active);
        let mut db = DVector::zeros(x.len());
        for (k, &j) in active.iter().enumerate() {
            db.axpy(b[k], &d.column(j), 1.0);
        }
        gx.axpy(step, &db, 1.0);
        // a <- (I - step D^T D) b
        a = d.tr_mul(&db) * (-step);
        for (k, &j) in active.iter().enumerate() {
            a[j] += b[k];
        }
    }
    Ok(InputGradient { gradient: gx, loss, converged: solve.converged, solve })
}

/// Geometry of the perturbation budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackNorm {
    /// Sign steps inside an l-infinity ball.
    Linf,
    /// Normalized-gradient steps inside an l2 ball.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Data range; use infinities for no range limit.
    pub clamp_low: f64,
    pub clamp_high: f64,
    pub include_gap_term: bool,
    pub norm: AttackNorm,
}

impl AttackConfig {
    pub fn new(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            clamp_low: f64::NEG_INFINITY,
            clamp_high: f64::INFINITY,
            include_gap_term: false,
            norm: AttackNorm::Linf,
        }
    }

    pub fn with_clamp(mut self, low: f64, high: f64) -> Self {
        self.clamp_low = low;
        self.clamp_high = high;
        self
    }

    pub fn with_gap_term(mut self, on: bool) -> Self {
        self.include_gap_term = on;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// `epsilon / steps`.
    pub fn step_size(&self) -> f64 {
        self.epsilon / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be finite and nonnegative, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(invalid("at least one attack step is required"));
        }
        if !(self.clamp_low < self.clamp_high) {
            return Err(invalid(format!("clamp range [{}, {}] is empty", self.clamp_low, self.clamp_high)));
        }
        Ok(())
    }
}

/// Moves `y` back inside `[x - eps, x + eps]` in floating point, so that
/// `|y - x| <= eps` holds for the computed difference.
fn into_linf_ball(y: f64, x: f64, eps: f64) -> f64 {
    let mut y = y.clamp(x - eps, x + eps);
    while (y - x).abs() > eps {
        y = if y > x { y.next_down() } else { y.next_up() };
    }
    y
}

/// The data range, widened where needed so that it contains `x`.
fn into_range(y: f64, x: f64, low: f64, high: f64) -> f64 {
    y.clamp(low.min(x), high.max(x))
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: DVector<f64>,
    /// Steps whose solve did not reach the solver tolerance.
    pub nonconverged_steps: usize,
}

/// Iterative gradient-sign attack starting at `x`. The data range is widened
/// per coordinate to include `x`, so both constraints can always be met.
pub fn ifgsm(pipeline: &Pipeline, x: &DVector<f64>, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(AttackResult { adversarial: x.clone(), nonconverged_steps: 0 });
    }
    let a = cfg.step_size();
    let mut y = x.clone();
    let mut warm = DVector::zeros(pipeline.solver.dictionary().n_atoms());
    let mut nonconverged = 0;
    for _ in 0..cfg.steps {
        let g = input_gradient_from(pipeline, &y, label, &warm, cfg.include_gap_term)?;
        if !g.converged {
            nonconverged += 1;
        }
        warm = g.solve.code.values;
        match cfg.norm {
            AttackNorm::Linf => {
                for i in 0..y.len() {
                    let s = g.gradient[i];
                    let sign = if s > 0.0 {
                        1.0
                    } else if s < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let stepped = into_linf_ball(y[i] + a * sign, x[i], cfg.epsilon);
                    y[i] = into_range(stepped, x[i], cfg.clamp_low, cfg.clamp_high);
                }
            }
            AttackNorm::L2 => {
                let n = g.gradient.norm();
                if n > 0.0 {
                    y.axpy(a / n, &g.gradient, 1.0);
                }
                let delta = &y - x;
                let dn = delta.norm();
                if dn > cfg.epsilon {
                    y = x + delta * (cfg.epsilon / dn);
                }
                for i in 0..y.len() {
                    y[i] = into_range(y[i], x[i], cfg.clamp_low, cfg.clamp_high);
                }
            }
        }
    }
    Ok(AttackResult { adversarial: y, nonconverged_steps: nonconverged })
}

/// Anything that maps an input signal to a class.
pub trait InputClassifier {
    fn predict_class(&self, x: &DVector<f64>) -> Result<usize>;
}

impl InputClassifier for Pipeline {
    fn predict_class(&self, x: &DVector<f64>) -> Result<usize> {
        Ok(self.predict(x)?.class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub epsilon: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "method,epsilon,accuracy,n_samples,seed";

/// Accuracy of `target` on perturbations crafted against `source`, one row
/// per budget. With `target` equal to `source` this is the white-box sweep.
#[allow(clippy::too_many_arguments)]
pub fn transfer_sweep(
    source: &Pipeline,
    target: &dyn InputClassifier,
    signals: &[DVector<f64>],
    labels: &[usize],
    epsilons: &[f64],
    template: &AttackConfig,
    method: &str,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if signals.len() != labels.len() {
        return Err(mismatch(format!("{} signals but {} labels", signals.len(), labels.len())));
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = template.with_epsilon(eps);
        cfg.validate()?;
        let mut correct = 0;
        for (x, &label) in signals.iter().zip(labels) {
            let y = ifgsm(source, x, label, &cfg)?.adversarial;
            if target.predict_class(&y)? == label {
                correct += 1;
            }
        }
        let accuracy = if signals.is_empty() { 0.0 } else { correct as f64 / signals.len() as f64 };
        rows.push(SweepRow { method: method.to_string(), epsilon: eps, accuracy, n_samples: signals.len(), seed });
    }
    Ok(rows)
}

/// White-box accuracy of `pipeline` for each budget.
pub fn attack_sweep(
    pipeline: &Pipeline,
    signals: &[DVector<f64>],
    labels: &[usize],
    epsilons: &[f64],
    template: &AttackConfig,
    method: &str,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    transfer_sweep(pipeline, pipeline, signals, labels, epsilons, template, method, seed)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:?},{:?},{},{}", r.method, r.epsilon, r.accuracy, r.n_samples, r.seed);
    }
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    std::fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}
