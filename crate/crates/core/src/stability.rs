//! Stability certificates: single-layer recovery guarantees, layered error
//! propagation, sufficient conditions for a positive exact recovery
//! coefficient, and classification margin certificates.

use std::fmt;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classify::LinearClassifier;
use crate::dictionary::{
    characteristic_of_support, erc, local_amplitude, local_l0, mutual_coherence, Dictionary, Neighborhoods, RegularizerSpec, SparseCode,
};
use crate::error::{invalid, mismatch, Error, Result};
use crate::linalg;
use crate::solver::{GbpSolver, LayeredProblem, SolveOptions, SolveResult};

/// Default trade-off constant between the sparsity and noise conditions.
pub const DEFAULT_C: f64 = 2.0 / 3.0;

/// Agreement required between two solver runs from different starting points.
pub const TWO_START_TOL: f64 = 1e-7;

/// Conditions and bounds of the single-layer stability theorem for one
/// instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Certificate {
    pub c: f64,
    pub lambda: f64,
    pub theta: f64,
    /// Absolute mutual coherence.
    pub mu: f64,
    /// With zero coherence the sparsity condition holds for any support.
    pub mu_is_zero: bool,
    /// Support of the characteristic vector of the true code.
    pub chi_support: Vec<usize>,
    /// Stripe norm of the characteristic vector.
    pub stripe: usize,
    /// `c theta / (1 + theta) * (1 + 1/mu)` (infinite when `mu = 0`).
    pub condition_a_bound: f64,
    pub condition_a: bool,
    /// Local amplitude of the noise.
    pub noise_amplitude: f64,
    /// `noise_amplitude / (lambda (1 - c))`.
    pub required_gamma_min: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub condition_b: bool,
    /// The dictionary restricted to the characteristic support has full
    /// column rank.
    pub rank_ok: bool,
    /// `(1 + theta) / ((1 + mu) theta (1 - c)) * noise_amplitude`: the
    /// coordinate-wise error bound at the smallest admissible weights.
    pub linf_bound: f64,
    /// `(1 + theta) / (theta (1 - c)) * noise_amplitude`.
    pub weak_linf_bound: f64,
    /// Error bound for the weights actually in the spec:
    /// `(1 + theta) / ((1 + mu)(1 + theta - c theta)) * (gamma_max + noise_amplitude)`.
    /// Equal to `linf_bound` when `gamma_min == required_gamma_min`.
    pub recovery_bound: f64,
    /// Smallest `c` in (0, 1) for which the sparsity condition holds, which
    /// gives the smallest weight requirement. `None` if no such `c` exists.
    pub min_c_for_a: Option<f64>,
    /// Weight requirement at `min_c_for_a`.
    pub tightest_required_gamma_min: Option<f64>,
}

impl Theorem2Certificate {
    pub fn holds(&self) -> bool {
        self.condition_a && self.condition_b && self.rank_ok
    }

    pub fn failing_conditions(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.condition_a {
            out.push(format!(
                "sparsity: stripe {} exceeds {:.6}",
                self.stripe, self.condition_a_bound
            ));
        }
        if !self.condition_b {
            out.push(format!(
                "weights: gamma_min {:.6e} below required {:.6e}",
                self.gamma_min, self.required_gamma_min
            ));
        }
        if !self.rank_ok {
            out.push("rank: restricted dictionary is rank deficient".into());
        }
        out
    }

    pub const CSV_HEADER: &'static str = "c,lambda,theta,mu,stripe,condition_a_bound,condition_a,noise_amplitude,\
required_gamma_min,gamma_min,gamma_max,condition_b,rank_ok,linf_bound,weak_linf_bound,recovery_bound";

    /// One CSV row in the column order of [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{},{:?},{},{:?},{:?},{:?},{:?},{},{},{:?},{:?},{:?}",
            self.c,
            self.lambda,
            self.theta,
            self.mu,
            self.stripe,
            self.condition_a_bound,
            self.condition_a,
            self.noise_amplitude,
            self.required_gamma_min,
            self.gamma_min,
            self.gamma_max,
            self.condition_b,
            self.rank_ok,
            self.linf_bound,
            self.weak_linf_bound,
            self.recovery_bound
        )
    }
}

impl fmt::Display for Theorem2Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        writeln!(f, "c = {:.6}, lambda = {:.6}, theta = {:.6}, mu = {:.6}", self.c, self.lambda, self.theta, self.mu)?;
        writeln!(
            f,
            "sparsity  [{}]: stripe {} <= {:.6} (slack {:.6})",
            mark(self.condition_a),
            self.stripe,
            self.condition_a_bound,
            self.condition_a_bound - self.stripe as f64
        )?;
        writeln!(
            f,
            "weights   [{}]: gamma_min {:.6e} >= {:.6e} (slack {:.6e})",
            mark(self.condition_b),
            self.gamma_min,
            self.required_gamma_min,
            self.gamma_min - self.required_gamma_min
        )?;
        writeln!(f, "rank      [{}]", mark(self.rank_ok))?;
        write!(
            f,
            "bounds: linf {:.6e}, weak {:.6e}, at these weights {:.6e}",
            self.linf_bound, self.weak_linf_bound, self.recovery_bound
        )
    }
}

/// Evaluates the single-layer stability theorem for `y = D gamma_true + noise`.
pub fn check_theorem2(
    dict: &Dictionary,
    spec: &RegularizerSpec,
    gamma_true: &SparseCode,
    noise: &DVector<f64>,
    c: f64,
) -> Result<Theorem2Certificate> {
    let neighborhoods = Neighborhoods::new(dict);
    check_theorem2_with(dict, &neighborhoods, spec, gamma_true, noise, c)
}

/// [`check_theorem2`] with precomputed neighborhoods of `dict`.
pub fn check_theorem2_with(
    dict: &Dictionary,
    neighborhoods: &Neighborhoods,
    spec: &RegularizerSpec,
    gamma_true: &SparseCode,
    noise: &DVector<f64>,
    c: f64,
) -> Result<Theorem2Certificate> {
    if !(c > 0.0 && c < 1.0) {
        return Err(invalid(format!("c must lie in (0, 1), got {c}")));
    }
    if spec.n_atoms() != dict.n_atoms() || gamma_true.len() != dict.n_atoms() {
        return Err(mismatch("dictionary, regularizer and code sizes differ"));
    }
    if neighborhoods.len() != dict.n_atoms() {
        return Err(mismatch("neighborhoods computed for a different dictionary"));
    }
    let mu = mutual_coherence(dict)?.absolute;
    let lambda = spec.lambda();
    let theta = spec.theta();
    let chi = characteristic_of_support(&gamma_true.support, spec);
    let chi_support: Vec<usize> = (0..chi.len()).filter(|&j| chi[j]).collect();
    let stripe = neighborhoods.stripe(&chi_support);
    let noise_amplitude = local_amplitude(noise, dict)?;

    let structural = theta / (1.0 + theta) * (1.0 + 1.0 / mu);
    let condition_a_bound = if mu == 0.0 { f64::INFINITY } else { c * structural };
    let condition_a = (stripe as f64) <= condition_a_bound;
    let required_gamma_min = noise_amplitude / (lambda * (1.0 - c));
    let condition_b = spec.gamma_min() >= required_gamma_min;
    let rank_ok = chi_support.is_empty()
        || linalg::numerical_rank(&dict.columns(&chi_support)) == chi_support.len();

    let linf_bound = (1.0 + theta) / ((1.0 + mu) * theta * (1.0 - c)) * noise_amplitude;
    let weak_linf_bound = (1.0 + theta) / (theta * (1.0 - c)) * noise_amplitude;
    let recovery_bound =
        (1.0 + theta) / ((1.0 + mu) * (1.0 + theta - c * theta)) * (spec.gamma_max() + noise_amplitude);

    let (min_c_for_a, tightest_required_gamma_min) = if mu == 0.0 {
        (None, None)
    } else {
        let cmin = stripe as f64 / structural;
        if cmin < 1.0 {
            let cmin = cmin.max(f64::MIN_POSITIVE);
            (Some(cmin), Some(noise_amplitude / (lambda * (1.0 - cmin))))
        } else {
            (None, None)
        }
    };

    Ok(Theorem2Certificate {
        c,
        lambda,
        theta,
        mu,
        mu_is_zero: mu == 0.0,
        chi_support,
        stripe,
        condition_a_bound,
        condition_a,
        noise_amplitude,
        required_gamma_min,
        gamma_min: spec.gamma_min(),
        gamma_max: spec.gamma_max(),
        condition_b,
        rank_ok,
        linf_bound,
        weak_linf_bound,
        recovery_bound,
        min_c_for_a,
        tightest_required_gamma_min,
    })
}

/// Outcome of checking the theorem's claims against a solver result.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// The recovered support lies inside the characteristic support.
    pub support_contained: bool,
    /// l-infinity distance between two runs from different starting points.
    pub two_start_distance: f64,
    pub two_start_agree: bool,
    pub linf_error: f64,
    pub bound: f64,
    pub within_bound: bool,
    /// Every true coefficient larger than the bound was recovered.
    pub large_entries_found: bool,
}

impl RecoveryReport {
    pub fn all_pass(&self) -> bool {
        self.support_contained && self.two_start_agree && self.within_bound && self.large_entries_found
    }
}

/// Checks the recovery claims of a certificate for the result of solving
/// `y` with `dict` and `spec`. The second run starts from a random point
/// drawn with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn verify_recovery(
    y: &DVector<f64>,
    dict: &Dictionary,
    spec: &RegularizerSpec,
    result: &SolveResult,
    gamma_true: &SparseCode,
    cert: &Theorem2Certificate,
    opts: &SolveOptions,
    seed: u64,
) -> Result<RecoveryReport> {
    let failing = cert.failing_conditions();
    if !failing.is_empty() {
        return Err(Error::PreconditionViolated(failing));
    }
    let mut in_chi = vec![false; dict.n_atoms()];
    for &j in &cert.chi_support {
        in_chi[j] = true;
    }
    let support_contained = result.code.support.iter().all(|&j| in_chi[j]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = linalg::linf(&gamma_true.values).max(1.0);
    let init = DVector::from_fn(dict.n_atoms(), |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let other = GbpSolver::new(dict, spec, opts.clone())?.solve_from(y, &init)?;
    let two_start_distance = linalg::linf(&(&other.code.values - &result.code.values));

    let linf_error = linalg::linf(&(&result.code.values - &gamma_true.values));
    let bound = cert.recovery_bound;
    let large_entries_found =
        (0..dict.n_atoms()).all(|j| gamma_true.values[j].abs() <= bound || result.code.values[j] != 0.0);
    Ok(RecoveryReport {
        support_contained,
        two_start_distance,
        two_start_agree: two_start_distance <= TWO_START_TOL,
        linf_error,
        bound,
        within_bound: linf_error < bound,
        large_entries_found,
    })
}

/// Per-layer quantities of the layered error-propagation bound.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBound {
    pub c: f64,
    pub lambda: f64,
    pub theta: f64,
    pub mu: f64,
    pub chi_support: Vec<usize>,
    pub stripe: usize,
    pub condition_a: bool,
    /// Error level of this layer's input under the weights in the specs.
    pub epsilon_in: f64,
    /// `epsilon_in / (lambda (1 - c))`.
    pub required_gamma_min: f64,
    pub gamma_min: f64,
    pub condition_b: bool,
    pub rank_ok: bool,
    /// `(1 + theta) / ((1 + mu) theta (1 - c))`.
    pub coefficient: f64,
    /// Input error level when every earlier layer uses its smallest
    /// admissible weights (`eps_{j-1}` of the error recursion).
    pub nominal_epsilon_in: f64,
    /// Coordinate-wise error bound of this layer's code at the smallest
    /// admissible weights: `coefficient * nominal_epsilon_in`.
    pub linf_bound: f64,
    /// Coordinate-wise bound for the weights actually in the spec (equal to
    /// `linf_bound` at the smallest admissible weights).
    pub recovery_bound: f64,
    /// Most nonzeros of the characteristic vector under one atom of the next
    /// dictionary (plain l0 for the last layer).
    pub local_count: usize,
    /// `sqrt(local_count) * linf_bound`.
    pub nominal_epsilon_out: f64,
    /// `sqrt(local_count) * recovery_bound`: the local amplitude of this
    /// layer's error as seen by the next layer.
    pub epsilon_out: f64,
    /// `sqrt(||chi||_0) (1 + theta) / (theta (1 - c)) * epsilon_in`, chained.
    pub weak_epsilon_out: f64,
}

impl LayerBound {
    pub fn holds(&self) -> bool {
        self.condition_a && self.condition_b && self.rank_ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredBounds {
    /// Local amplitude of the signal noise with respect to the first
    /// dictionary.
    pub epsilon0: f64,
    pub layers: Vec<LayerBound>,
}

impl LayeredBounds {
    pub fn holds(&self) -> bool {
        self.layers.iter().all(LayerBound::holds)
    }

    /// `eps_0, eps_1, ..., eps_K` with every layer at its smallest admissible
    /// weights.
    pub fn epsilons(&self) -> Vec<f64> {
        std::iter::once(self.epsilon0).chain(self.layers.iter().map(|l| l.nominal_epsilon_out)).collect()
    }

    /// The same sequence for the weights actually in the specs.
    pub fn effective_epsilons(&self) -> Vec<f64> {
        std::iter::once(self.epsilon0).chain(self.layers.iter().map(|l| l.epsilon_out)).collect()
    }
}

/// Propagates the noise level through the layers of `problem` for true codes
/// `gamma_true` (layer `j` satisfies `gamma_{j-1} = D_j gamma_j`).
pub fn layered_error_bounds(
    problem: &LayeredProblem,
    gamma_true: &[SparseCode],
    noise: &DVector<f64>,
    c: &[f64],
) -> Result<LayeredBounds> {
    let k = problem.depth();
    if gamma_true.len() != k || c.len() != k {
        return Err(mismatch(format!("{k} layers but {} codes and {} constants", gamma_true.len(), c.len())));
    }
    if let Some(bad) = c.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
        return Err(invalid(format!("c must lie in (0, 1), got {bad}")));
    }
    let epsilon0 = local_amplitude(noise, problem.dictionary(0))?;
    let mut eps = epsilon0;
    let mut nominal = epsilon0;
    let mut weak = epsilon0;
    let mut layers = Vec::with_capacity(k);
    for j in 0..k {
        let (d, spec) = &problem.layers()[j];
        let code = &gamma_true[j];
        if code.len() != d.n_atoms() {
            return Err(mismatch(format!("layer {j} code has length {}", code.len())));
        }
        let mu = mutual_coherence(d)?.absolute;
        let lambda = spec.lambda();
        let theta = spec.theta();
        let cj = c[j];
        let chi = characteristic_of_support(&code.support, spec);
        let chi_support: Vec<usize> = (0..chi.len()).filter(|&i| chi[i]).collect();
        let stripe = Neighborhoods::new(d).stripe(&chi_support);
        let condition_a = mu == 0.0 || (stripe as f64) <= cj * theta / (1.0 + theta) * (1.0 + 1.0 / mu);
        let required_gamma_min = eps / (lambda * (1.0 - cj));
        let condition_b = spec.gamma_min() >= required_gamma_min;
        let rank_ok =
            chi_support.is_empty() || linalg::numerical_rank(&d.columns(&chi_support)) == chi_support.len();
        let coefficient = (1.0 + theta) / ((1.0 + mu) * theta * (1.0 - cj));
        let linf_bound = coefficient * nominal;
        let recovery_bound =
            (1.0 + theta) / ((1.0 + mu) * (1.0 + theta - cj * theta)) * (spec.gamma_max() + eps);
        let local_count = if j + 1 < k {
            local_l0(&chi_support, problem.dictionary(j + 1))?
        } else {
            chi_support.len()
        };
        let epsilon_out = (local_count as f64).sqrt() * recovery_bound;
        let nominal_epsilon_out = (local_count as f64).sqrt() * linf_bound;
        let weak_out = (chi_support.len() as f64).sqrt() * (1.0 + theta) / (theta * (1.0 - cj)) * weak;
        layers.push(LayerBound {
            c: cj,
            lambda,
            theta,
            mu,
            chi_support,
            stripe,
            condition_a,
            epsilon_in: eps,
            required_gamma_min,
            gamma_min: spec.gamma_min(),
            condition_b,
            rank_ok,
            coefficient,
            nominal_epsilon_in: nominal,
            linf_bound,
            recovery_bound,
            local_count,
            nominal_epsilon_out,
            epsilon_out,
            weak_epsilon_out: weak_out,
        });
        eps = epsilon_out;
        nominal = nominal_epsilon_out;
        weak = weak_out;
    }
    Ok(LayeredBounds { epsilon0, layers })
}

/// Claim checks for one layer of a layered solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub support_contained: bool,
    pub linf_error: f64,
    pub within_bound: bool,
    /// Local amplitude of the error as seen by the next dictionary (plain
    /// l2 for the last layer).
    pub local_error: f64,
    pub local_within_epsilon: bool,
    pub large_entries_found: bool,
}

impl LayerReport {
    pub fn all_pass(&self) -> bool {
        self.support_contained && self.within_bound && self.local_within_epsilon && self.large_entries_found
    }
}

pub fn verify_layered_recovery(
    problem: &LayeredProblem,
    results: &[SolveResult],
    gamma_true: &[SparseCode],
    bounds: &LayeredBounds,
) -> Result<Vec<LayerReport>> {
    if !bounds.holds() {
        let failing = bounds
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.holds())
            .map(|(j, l)| {
                format!("layer {j}: sparsity {} weights {} rank {}", l.condition_a, l.condition_b, l.rank_ok)
            })
            .collect();
        return Err(Error::PreconditionViolated(failing));
    }
    let k = problem.depth();
    if results.len() != k || gamma_true.len() != k {
        return Err(mismatch("one result and one true code per layer required"));
    }
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let b = &bounds.layers[j];
        let est = &results[j].code.values;
        let truth = &gamma_true[j].values;
        let err = est - truth;
        let mut in_chi = vec![false; est.len()];
        for &i in &b.chi_support {
            in_chi[i] = true;
        }
        let linf_error = linalg::linf(&err);
        let local_error = if j + 1 < k { local_amplitude(&err, problem.dictionary(j + 1))? } else { err.norm() };
        out.push(LayerReport {
            support_contained: results[j].code.support.iter().all(|&i| in_chi[i]),
            linf_error,
            within_bound: linf_error < b.recovery_bound,
            local_error,
            local_within_epsilon: local_error <= b.epsilon_out,
            large_entries_found: (0..est.len()).all(|i| truth[i].abs() <= b.recovery_bound || est[i] != 0.0),
        });
    }
    Ok(out)
}

/// Sufficient conditions for a positive exact recovery coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct P1Report {
    pub mu: f64,
    pub lambda: f64,
    /// Maximal stripe of the dictionary.
    pub k_d: usize,
    /// Size of the support.
    pub k_support: usize,
    /// Stripe norm of the support indicator.
    pub k_support_stripe: usize,
    /// `1 + lambda / ((1 + lambda) mu)`.
    pub max_stripe_bound: f64,
    /// `lambda / (1 + lambda) * (1 + 1/mu)`.
    pub support_bound: f64,
    pub max_stripe_condition: bool,
    pub support_size_condition: bool,
    pub support_stripe_condition: bool,
    /// Stripe norm of the characteristic vector (when a spec is given) and
    /// whether it meets `support_bound`; this certifies the widened support.
    pub chi_stripe: Option<usize>,
    pub chi_condition: Option<bool>,
    /// Exact coefficient, or `None` when the restricted dictionary is rank
    /// deficient.
    pub erc: Option<f64>,
}

impl P1Report {
    pub fn any_condition(&self) -> bool {
        self.max_stripe_condition || self.support_size_condition || self.support_stripe_condition
    }
}

/// Evaluates the sufficient conditions for `support` and computes the exact
/// coefficient for comparison. With `spec`, also evaluates the condition on
/// the characteristic vector of the support.
pub fn proposition_p1_conditions(
    dict: &Dictionary,
    support: &[usize],
    lambda: f64,
    spec: Option<&RegularizerSpec>,
) -> Result<P1Report> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(invalid(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    let mu = mutual_coherence(dict)?.absolute;
    let neighborhoods = Neighborhoods::new(dict);
    let k_d = neighborhoods.max_size();
    let k_support = support.len();
    let k_support_stripe = neighborhoods.stripe(support);
    let (max_stripe_bound, support_bound) = if mu == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (1.0 + lambda / ((1.0 + lambda) * mu), lambda / (1.0 + lambda) * (1.0 + 1.0 / mu))
    };
    let (chi_stripe, chi_condition) = match spec {
        Some(s) => {
            let chi = characteristic_of_support(support, s);
            let idx: Vec<usize> = (0..chi.len()).filter(|&j| chi[j]).collect();
            let st = neighborhoods.stripe(&idx);
            (Some(st), Some((st as f64) < support_bound))
        }
        None => (None, None),
    };
    let erc = match erc(support, dict, lambda) {
        Ok(v) => Some(v),
        Err(Error::RankDeficient { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(P1Report {
        mu,
        lambda,
        k_d,
        k_support,
        k_support_stripe,
        max_stripe_bound,
        support_bound,
        max_stripe_condition: (k_d as f64) < max_stripe_bound,
        support_size_condition: (k_support as f64) < support_bound,
        support_stripe_condition: (k_support_stripe as f64) < support_bound,
        chi_stripe,
        chi_condition,
        erc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginCertificate {
    /// `max_{i != j} ||w_i - w_j||_2` (or `||w||_2` for a binary classifier).
    pub spread: f64,
    pub threshold: f64,
    /// The margin strictly exceeds the threshold, so the predicted class
    /// cannot change under the certified perturbation.
    pub certified: bool,
}

/// A margin larger than `spread * sqrt(chi_count) * coordinate_bound`
/// guarantees the class is unchanged, where `coordinate_bound` bounds the
/// coordinate-wise error of the final code (or of its pooled norms) and
/// `chi_count` is the size of the characteristic support of that code.
pub fn margin_certificate(
    margin: f64,
    classifier: &LinearClassifier,
    chi_count: usize,
    coordinate_bound: f64,
) -> MarginCertificate {
    let spread = classifier.weight_spread();
    let threshold = spread * (chi_count as f64).sqrt() * coordinate_bound;
    MarginCertificate { spread, threshold, certified: margin > threshold }
}

/// The coordinate bound of the last layer of a layered bound, for
/// [`margin_certificate`].
pub fn final_layer_bound(bounds: &LayeredBounds) -> Option<(usize, f64)> {
    bounds.layers.last().map(|l| (l.chi_support.len(), l.recovery_bound))
}
