use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::packing::build_low_coherence_dictionary;
use crate::dictionary::{
    characteristic_of_support, local_amplitude, mutual_coherence, support_of, Dictionary, GroupPartition,
    Neighborhoods, NormTag, RegularizerSpec, SparseCode,
};
use crate::error::{invalid, mismatch, Error, Result};
use crate::solver::LayeredProblem;
use crate::stability::{check_theorem2_with, layered_error_bounds, LayeredBounds, Theorem2Certificate};

/// What to build in [`generate_certified_instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedRequest {
    pub partition: GroupPartition,
    /// One tag per group.
    pub tags: Vec<NormTag>,
    pub active_groups: usize,
    /// Nonzeros drawn in each active l1 or elastic group (l2 groups are
    /// always fully active).
    pub entries_per_group: usize,
    /// Local amplitude of the noise.
    pub noise_level: f64,
    pub c: f64,
    /// Ratio between the largest and smallest group weight (at least 1).
    pub weight_ratio: f64,
    /// Smallest weight as a multiple of the required one (at least 1).
    pub weight_slack: f64,
    /// The smallest weight never goes below this, so noiseless instances
    /// still get a positive regularizer.
    pub weight_floor: f64,
    pub nonnegative: bool,
    pub seed: u64,
}

impl CertifiedRequest {
    pub fn new(partition: GroupPartition, tags: Vec<NormTag>, noise_level: f64, c: f64, seed: u64) -> Self {
        CertifiedRequest {
            partition,
            tags,
            active_groups: 1,
            entries_per_group: 2,
            noise_level,
            c,
            weight_ratio: 1.0,
            weight_slack: 1.0,
            weight_floor: 1e-3,
            nonnegative: false,
            seed,
        }
    }
}

/// A noisy signal together with a stability certificate whose conditions all
/// hold.
#[derive(Debug, Clone)]
pub struct CertifiedInstance {
    pub dictionary: Dictionary,
    pub spec: RegularizerSpec,
    pub gamma_true: SparseCode,
    pub noise: DVector<f64>,
    /// `D gamma_true`.
    pub clean: DVector<f64>,
    /// `clean + noise`.
    pub signal: DVector<f64>,
    pub certificate: Theorem2Certificate,
}

/// Builds a low-coherence `n x m` dictionary and a certified instance on it.
pub fn generate_certified_instance(n: usize, m: usize, req: &CertifiedRequest) -> Result<CertifiedInstance> {
    let packing = build_low_coherence_dictionary(n, m, Some(&req.partition), req.seed, None, 200)?;
    certified_instance_on(&packing.dictionary, req)
}

fn gaussian_with_local_amplitude(dict: &Dictionary, level: f64, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let n = dict.n_signal();
    if level == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let amp = local_amplitude(&e, dict)?;
    Ok(e * (level / amp))
}

/// Draws a certified instance on a given unit-norm dictionary. Fails with
/// [`Error::Infeasible`] when the drawn support is too large for the
/// sparsity condition at the requested `c`.
pub fn certified_instance_on(dict: &Dictionary, req: &CertifiedRequest) -> Result<CertifiedInstance> {
    let p = &req.partition;
    let g = p.n_groups();
    if p.n_atoms() != dict.n_atoms() || req.tags.len() != g {
        return Err(mismatch("partition, tags and dictionary disagree"));
    }
    if req.active_groups == 0 || req.active_groups > g {
        return Err(invalid(format!("active groups must lie in 1..={g}")));
    }
    if !(req.weight_ratio >= 1.0 && req.weight_slack >= 1.0 && req.weight_floor > 0.0) {
        return Err(invalid("weight ratio and slack must be at least 1 and the floor positive"));
    }
    if !(req.noise_level >= 0.0 && req.noise_level.is_finite()) {
        return Err(invalid("noise level must be nonnegative"));
    }
    if !(req.c > 0.0 && req.c < 1.0) {
        return Err(invalid(format!("c must lie in (0, 1), got {}", req.c)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mu = mutual_coherence(dict)?.absolute;
    let lambda = req.tags.iter().map(NormTag::lambda_contribution).fold(1.0, f64::min);

    // Weights: the smallest sits at the admissible minimum, the largest at
    // `weight_ratio` times that, the rest in between.
    let gamma_min = (req.weight_slack * req.noise_level / (lambda * (1.0 - req.c))).max(req.weight_floor);
    let mut weights: Vec<f64> =
        (0..g).map(|_| gamma_min * (1.0 + (req.weight_ratio - 1.0) * rng.random::<f64>())).collect();
    weights[0] = gamma_min;
    if g > 1 {
        weights[g - 1] = gamma_min * req.weight_ratio;
    }
    let spec = RegularizerSpec::new(p.clone(), req.tags.clone(), weights)?;
    let theta = spec.theta();

    let mut support = Vec::new();
    for grp in index::sample(&mut rng, g, req.active_groups).iter() {
        let atoms = p.group(grp);
        match req.tags[grp] {
            NormTag::L2 => support.extend_from_slice(atoms),
            _ => {
                let k = req.entries_per_group.clamp(1, atoms.len());
                support.extend(index::sample(&mut rng, atoms.len(), k).iter().map(|i| atoms[i]));
            }
        }
    }
    support.sort_unstable();
    let chi = characteristic_of_support(&support, &spec);
    let chi_support: Vec<usize> = (0..chi.len()).filter(|&j| chi[j]).collect();
    let neighborhoods = Neighborhoods::new(dict);
    let stripe = neighborhoods.stripe(&chi_support);
    let structural = theta / (1.0 + theta) * (1.0 + 1.0 / mu);
    if mu > 0.0 && stripe as f64 > req.c * structural {
        return Err(Error::Infeasible(format!(
            "stripe {stripe} exceeds the sparsity bound {:.4} (mu {mu:.4}, theta {theta:.4}, c {}); \
             the support needs c >= {:.4}",
            req.c * structural,
            req.c,
            stripe as f64 / structural
        )));
    }

    // Entries sit at least twice the error bound away from zero.
    let bound =
        (1.0 + theta) / ((1.0 + mu) * (1.0 + theta - req.c * theta)) * (spec.gamma_max() + req.noise_level);
    let low = (2.0 * bound).max(1.0);
    let mut values = DVector::zeros(dict.n_atoms());
    for &j in &support {
        let a = rng.random_range(low..=2.0 * low);
        values[j] = if req.nonnegative || rng.random::<bool>() { a } else { -a };
    }
    let gamma_true = SparseCode::new(values, p)?;
    let noise = gaussian_with_local_amplitude(dict, req.noise_level, &mut rng)?;
    let clean = dict.matrix() * &gamma_true.values;
    let signal = &clean + &noise;
    let certificate = check_theorem2_with(dict, &neighborhoods, &spec, &gamma_true, &noise, req.c)?;
    if !certificate.holds() {
        return Err(Error::Infeasible(certificate.failing_conditions().join("; ")));
    }
    Ok(CertifiedInstance { dictionary: dict.clone(), spec, gamma_true, noise, clean, signal, certificate })
}

/// What to build in [`generate_layered_certified_instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredRequest {
    /// Atoms per group in the second layer (l2 groups of adjacent atoms).
    pub group_size: usize,
    pub active_groups: usize,
    /// Range of the rotation angle (radians) of each second-layer atom away
    /// from its coordinate axis.
    pub angle_low: f64,
    pub angle_high: f64,
    pub noise_level: f64,
    /// One constant per layer.
    pub c: Vec<f64>,
    pub weight_slack: f64,
    pub weight_floor: f64,
    pub seed: u64,
}

impl LayeredRequest {
    pub fn new(noise_level: f64, seed: u64) -> Self {
        LayeredRequest {
            group_size: 2,
            active_groups: 1,
            angle_low: 0.15,
            angle_high: 0.25,
            noise_level,
            c: vec![0.8, 0.9],
            weight_slack: 1.0,
            weight_floor: 1e-3,
            seed,
        }
    }
}

/// A two-layer chain `x = D1 D2 gamma_2 + noise` whose layered bounds hold.
#[derive(Debug, Clone)]
pub struct LayeredInstance {
    pub problem: LayeredProblem,
    /// `gamma_1 = D2 gamma_2` and `gamma_2`.
    pub codes: Vec<SparseCode>,
    pub noise: DVector<f64>,
    pub signal: DVector<f64>,
    pub bounds: LayeredBounds,
}

/// Square second-layer dictionary whose atom `j` lives on rows `j` and
/// `j + 1` (cyclically), rotated by `angles[j]`.
pub fn banded_dictionary(angles: &[f64]) -> Result<Dictionary> {
    let n = angles.len();
    let mut m = DMatrix::zeros(n, n);
    for (j, a) in angles.iter().enumerate() {
        m[(j, j)] = a.cos();
        m[((j + 1) % n, j)] += a.sin();
    }
    Dictionary::new(m)
}

/// Builds a certified two-layer instance whose first dictionary is `d1`. The
/// first layer uses l1 singletons, the second l2 groups of adjacent banded
/// atoms. Weights of each layer sit at the minimum admissible for the error
/// arriving from the layer before.
pub fn generate_layered_certified_instance(d1: &Dictionary, req: &LayeredRequest) -> Result<LayeredInstance> {
    let m1 = d1.n_atoms();
    if req.c.len() != 2 {
        return Err(invalid("two constants required"));
    }
    if req.group_size == 0 || !m1.is_multiple_of(req.group_size) {
        return Err(invalid(format!("group size {} does not divide {m1}", req.group_size)));
    }
    if !(0.0 < req.angle_low && req.angle_low <= req.angle_high && req.angle_high < std::f64::consts::FRAC_PI_4) {
        return Err(invalid("angles must satisfy 0 < low <= high < pi/4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let angles: Vec<f64> = (0..m1).map(|_| rng.random_range(req.angle_low..=req.angle_high)).collect();
    let d2 = banded_dictionary(&angles)?;
    let p1 = GroupPartition::singletons(m1);
    let p2 = GroupPartition::contiguous(m1, req.group_size)?;

    let mut values2 = DVector::zeros(m1);
    for grp in index::sample(&mut rng, p2.n_groups(), req.active_groups).iter() {
        for &j in p2.group(grp) {
            values2[j] = rng.random_range(1.0..=2.0);
        }
    }
    let noise = gaussian_with_local_amplitude(d1, req.noise_level, &mut rng)?;

    let layer_problem = |g1: f64, g2: f64| -> Result<LayeredProblem> {
        LayeredProblem::new(vec![
            (d1.clone(), RegularizerSpec::uniform(p1.clone(), NormTag::L1, g1)?),
            (d2.clone(), RegularizerSpec::uniform(p2.clone(), NormTag::L2, g2)?),
        ])
    };
    let codes_for = |v2: &DVector<f64>| -> Result<Vec<SparseCode>> {
        Ok(vec![SparseCode::new(d2.matrix() * v2, &p1)?, SparseCode::new(v2.clone(), &p2)?])
    };

    // Supports do not depend on the amplitude scale, so the weights and bounds
    // can be fixed before the amplitudes are.
    let codes = codes_for(&values2)?;
    let eps0 = local_amplitude(&noise, d1)?;
    let gamma1 = (req.weight_slack * eps0 / (1.0 - req.c[0])).max(req.weight_floor);
    let first = layered_error_bounds(&layer_problem(gamma1, 1.0)?, &codes, &noise, &req.c)?;
    let eps1 = first.layers[0].epsilon_out;
    let gamma2 = (req.weight_slack * eps1 / (1.0 - req.c[1])).max(req.weight_floor);
    let problem = layer_problem(gamma1, gamma2)?;
    let bounds = layered_error_bounds(&problem, &codes, &noise, &req.c)?;

    let smallest = |v: &DVector<f64>| {
        support_of(v).iter().map(|&j| v[j].abs()).fold(f64::INFINITY, f64::min)
    };
    let scale = [
        2.0 * bounds.layers[0].recovery_bound / smallest(&codes[0].values),
        2.0 * bounds.layers[1].recovery_bound / smallest(&codes[1].values),
        1.0,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let codes = codes_for(&(values2 * scale))?;
    let bounds = layered_error_bounds(&problem, &codes, &noise, &req.c)?;
    if !bounds.holds() {
        let failing = bounds
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.holds())
            .map(|(j, l)| {
                format!(
                    "layer {j}: stripe {} (mu {:.4}, theta {:.4}, c {}), weights {}, rank {}",
                    l.stripe, l.mu, l.theta, l.c, l.condition_b, l.rank_ok
                )
            })
            .collect::<Vec<_>>();
        return Err(Error::Infeasible(failing.join("; ")));
    }
    let signal = d1.matrix() * &codes[0].values + &noise;
    Ok(LayeredInstance { problem, codes, noise, signal, bounds })
}
