mod common;

use common::*;
use groupsparse::classify::LinearClassifier;
use groupsparse::dictionary::{GroupPartition, NormTag, RegularizerSpec, SparseCode};
use groupsparse::solver::{solve_gbp, LayeredProblem, SolveOptions};
use groupsparse::stability::{
    check_theorem2, layered_error_bounds, margin_certificate, proposition_p1_conditions, verify_recovery,
    DEFAULT_C,
};
use groupsparse::{Dictionary, Error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Largest absolute inner product between distinct columns, by brute force.
fn brute_coherence(d: &DMatrix<f64>) -> f64 {
    let mut mu = 0.0_f64;
    for i in 0..d.ncols() {
        for j in 0..d.ncols() {
            if i != j {
                mu = mu.max(d.column(i).dot(&d.column(j)).abs());
            }
        }
    }
    mu
}

/// Unit-norm perturbation of the identity: nearly orthogonal and square.
fn near_identity(seed: u64, n: usize, delta: f64) -> Dictionary {
    let mut r = rng(seed);
    let m = DMatrix::identity(n, n) + gaussian_matrix(&mut r, n, n) * delta;
    Dictionary::normalized(m).unwrap()
}

fn code(values: Vec<f64>, p: &GroupPartition) -> SparseCode {
    SparseCode::new(DVector::from_vec(values), p).unwrap()
}

#[test]
fn worked_constants_at_two_thirds() {
    let mut r = rng(3);
    let d = unit_dictionary(&mut r, 12, 20);
    let p = GroupPartition::contiguous(20, 4).unwrap();
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L2, 0.7).unwrap();
    let mut v = vec![0.0; 20];
    v[4] = 1.0;
    let g = code(v, &p);
    let e = gaussian_vector(&mut r, 12) * 0.01;
    let cert = check_theorem2(&d, &spec, &g, &e, DEFAULT_C).unwrap();

    // Every atom is dense, so the local amplitude is the plain norm.
    let amp = e.norm();
    let mu = brute_coherence(d.matrix());
    assert_eq!(cert.lambda, 1.0);
    assert_eq!(cert.theta, 1.0);
    assert!((cert.noise_amplitude - amp).abs() < 1e-15);
    assert!((cert.mu - mu).abs() < 1e-15);
    assert!((cert.required_gamma_min - 3.0 * amp).abs() < 1e-14);
    assert!((cert.weak_linf_bound - 6.0 * amp).abs() < 1e-14);
    assert!((cert.linf_bound - 6.0 * amp / (1.0 + mu)).abs() < 1e-14);
    assert!((cert.condition_a_bound - (1.0 + 1.0 / mu) / 3.0).abs() < 1e-12);
    assert_eq!(cert.chi_support, vec![4, 5, 6, 7]);
    assert_eq!(cert.stripe, 4);
}

#[test]
fn zero_noise_gives_zero_bounds() {
    let mut r = rng(4);
    let d = unit_dictionary(&mut r, 8, 10);
    let p = GroupPartition::singletons(10);
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L1, 0.1).unwrap();
    let mut v = vec![0.0; 10];
    v[2] = 1.5;
    let cert = check_theorem2(&d, &spec, &code(v, &p), &DVector::zeros(8), 0.5).unwrap();
    assert_eq!(cert.required_gamma_min, 0.0);
    assert_eq!(cert.linf_bound, 0.0);
    assert_eq!(cert.weak_linf_bound, 0.0);
    assert!(cert.condition_b);
}

#[test]
fn orthonormal_dictionary_always_meets_sparsity() {
    let d = Dictionary::new(DMatrix::identity(4, 4)).unwrap();
    let p = GroupPartition::singletons(4);
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L1, 1.0).unwrap();
    for c in [0.01, 0.5, 0.99] {
        let cert = check_theorem2(&d, &spec, &code(vec![1.0, 0.0, 0.0, 0.0], &p), &DVector::zeros(4), c).unwrap();
        assert_eq!(cert.stripe, 1);
        assert!(cert.mu_is_zero);
        assert_eq!(cert.condition_a_bound, f64::INFINITY);
        assert!(cert.condition_a);
        assert!(cert.holds());
    }
}

#[test]
fn rejects_c_outside_open_interval() {
    let d = Dictionary::new(DMatrix::identity(3, 3)).unwrap();
    let p = GroupPartition::singletons(3);
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L1, 1.0).unwrap();
    let g = SparseCode::zeros(&p);
    for c in [0.0, 1.0, 1.5, -0.2, f64::NAN] {
        assert!(matches!(
            check_theorem2(&d, &spec, &g, &DVector::zeros(3), c),
            Err(Error::InvalidInput(_))
        ));
    }
}

#[test]
fn smallest_c_gives_tightest_weight_requirement() {
    let d = near_identity(5, 10, 0.01);
    let p = GroupPartition::contiguous(10, 2).unwrap();
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L2, 1.0).unwrap();
    let mut v = vec![0.0; 10];
    v[0] = 1.0;
    let e = DVector::from_element(10, 1e-3);
    let cert = check_theorem2(&d, &spec, &code(v.clone(), &p), &e, DEFAULT_C).unwrap();
    let cmin = cert.min_c_for_a.unwrap();
    // theta = 1: the sparsity bound is c (1 + 1/mu) / 2.
    assert!((cmin - 2.0 * 2.0 / (1.0 + 1.0 / cert.mu)).abs() < 1e-12);
    let at_min = check_theorem2(&d, &spec, &code(v, &p), &e, cmin).unwrap();
    assert!(at_min.condition_a);
    assert!((cert.tightest_required_gamma_min.unwrap() - at_min.required_gamma_min).abs() < 1e-15);
    assert!(at_min.required_gamma_min < cert.required_gamma_min);
}

#[test]
fn noiseless_recovery_is_exact() {
    let d = near_identity(6, 10, 0.01);
    assert!(brute_coherence(d.matrix()) <= 0.05);
    let p = GroupPartition::contiguous(10, 2).unwrap();
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L2, 1e-7).unwrap();
    let truth = code(vec![0.0, 0.0, 1.2, -1.7, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &p);
    let y = d.synthesize(&truth.values).unwrap();
    let cert = check_theorem2(&d, &spec, &truth, &DVector::zeros(10), DEFAULT_C).unwrap();
    assert!(cert.holds());
    let opts = SolveOptions::default().with_residual_tol(1e-13).with_max_iter(100_000);
    let res = solve_gbp(&y, &d, &spec, &opts).unwrap();
    let rep = verify_recovery(&y, &d, &spec, &res, &truth, &cert, &opts, 11).unwrap();
    assert!(rep.all_pass(), "{rep:?}");
    assert!(rep.linf_error < 1e-6);
}

#[test]
fn noisy_certified_instance_passes_all_claims() {
    let d = near_identity(7, 10, 0.01);
    let p = GroupPartition::contiguous(10, 2).unwrap();
    let truth = code(vec![0.0, 0.0, 0.0, 0.0, 1.5, 1.1, 0.0, 0.0, 0.0, 0.0], &p);
    let mut r = rng(8);
    let e = gaussian_vector(&mut r, 10) * 0.01;
    let amp = e.norm();
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L2, 3.0 * amp * 1.001).unwrap();
    let y = d.synthesize(&truth.values).unwrap() + &e;
    let cert = check_theorem2(&d, &spec, &truth, &e, DEFAULT_C).unwrap();
    assert!(cert.holds(), "{}", cert);
    let opts = SolveOptions::default().with_residual_tol(1e-12).with_max_iter(100_000);
    let res = solve_gbp(&y, &d, &spec, &opts).unwrap();
    let rep = verify_recovery(&y, &d, &spec, &res, &truth, &cert, &opts, 12).unwrap();
    assert!(rep.all_pass(), "{rep:?}");
}

#[test]
fn large_noise_violates_precondition() {
    let d = near_identity(9, 10, 0.01);
    let p = GroupPartition::contiguous(10, 2).unwrap();
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L2, 0.01).unwrap();
    let truth = code(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &p);
    let e = DVector::from_element(10, 1.0);
    let y = d.synthesize(&truth.values).unwrap() + &e;
    let cert = check_theorem2(&d, &spec, &truth, &e, DEFAULT_C).unwrap();
    assert!(!cert.condition_b);
    let opts = SolveOptions::default();
    let res = solve_gbp(&y, &d, &spec, &opts).unwrap();
    match verify_recovery(&y, &d, &spec, &res, &truth, &cert, &opts, 0) {
        Err(Error::PreconditionViolated(msgs)) => {
            assert_eq!(msgs.len(), 1);
            assert!(msgs[0].starts_with("weights"));
        }
        other => panic!("expected precondition failure, got {other:?}"),
    }
}

#[test]
fn certificate_serializes_every_field() {
    let d = Dictionary::new(DMatrix::identity(3, 3)).unwrap();
    let p = GroupPartition::singletons(3);
    let spec = RegularizerSpec::uniform(p.clone(), NormTag::L1, 1.0).unwrap();
    let cert = check_theorem2(&d, &spec, &SparseCode::zeros(&p), &DVector::zeros(3), 0.5).unwrap();
    let cols = groupsparse::stability::Theorem2Certificate::CSV_HEADER.split(',').count();
    assert_eq!(cert.csv_row().split(',').count(), cols);
    let text = cert.to_string();
    assert!(text.contains("sparsity  [ok]"));
}

fn two_layer(seed: u64) -> (LayeredProblem, Vec<SparseCode>) {
    let mut r = rng(seed);
    let d1 = unit_dictionary(&mut r, 10, 12);
    let d2 = unit_dictionary(&mut r, 12, 16);
    let p1 = GroupPartition::singletons(12);
    let p2 = GroupPartition::contiguous(16, 4).unwrap();
    let s1 = RegularizerSpec::uniform(p1.clone(), NormTag::L1, 0.3).unwrap();
    let s2 = RegularizerSpec::uniform(p2.clone(), NormTag::L2, 0.2).unwrap();
    let mut g2 = vec![0.0; 16];
    g2[8] = 1.0;
    g2[10] = -0.5;
    let g2 = DVector::from_vec(g2);
    let g1 = d2.synthesize(&g2).unwrap();
    let problem = LayeredProblem::new(vec![(d1, s1), (d2, s2)]).unwrap();
    (problem, vec![SparseCode::new(g1, &p1).unwrap(), SparseCode::new(g2, &p2).unwrap()])
}

#[test]
fn single_layer_bounds_reduce_to_weak_bound() {
    let (problem, codes) = two_layer(10);
    let (d1, s1) = problem.layers()[0].clone();
    let single = LayeredProblem::new(vec![(d1.clone(), s1.clone())]).unwrap();
    let mut r = rng(11);
    let e = gaussian_vector(&mut r, 10) * 0.02;
    let bounds = layered_error_bounds(&single, &codes[..1], &e, &[DEFAULT_C]).unwrap();
    let cert = check_theorem2(&d1, &s1, &codes[0], &e, DEFAULT_C).unwrap();
    let l = &bounds.layers[0];
    let expect = (cert.chi_support.len() as f64).sqrt() * cert.weak_linf_bound;
    assert!((l.weak_epsilon_out - expect).abs() <= 1e-12 * expect.max(1.0));
    assert!((l.linf_bound - cert.linf_bound).abs() < 1e-15);
    assert!((bounds.epsilon0 - cert.noise_amplitude).abs() < 1e-15);
}

#[test]
fn weak_chain_uses_factor_six_per_layer() {
    let (problem, codes) = two_layer(12);
    let mut r = rng(13);
    let e = gaussian_vector(&mut r, 10) * 0.01;
    let b = layered_error_bounds(&problem, &codes, &e, &[DEFAULT_C, DEFAULT_C]).unwrap();
    let chi0 = b.layers[0].chi_support.len() as f64;
    let chi1 = b.layers[1].chi_support.len() as f64;
    // Uniform weights and lambda = 1 give theta = 1 in both layers.
    let expect1 = e.norm() * 6.0 * chi0.sqrt();
    let expect2 = e.norm() * 36.0 * (chi0 * chi1).sqrt();
    assert!((b.layers[0].weak_epsilon_out - expect1).abs() < 1e-12 * expect1);
    assert!((b.layers[1].weak_epsilon_out - expect2).abs() < 1e-12 * expect2);
    assert_eq!(b.layers[1].chi_support, vec![8, 9, 10, 11]);
    assert_eq!(b.layers[1].local_count, 4);

    let zero = layered_error_bounds(&problem, &codes, &DVector::zeros(10), &[0.5, 0.5]).unwrap();
    assert_eq!(zero.epsilon0, 0.0);
    assert!(zero.epsilons().iter().all(|&e| e == 0.0));
    assert!(zero.layers.iter().all(|l| l.weak_epsilon_out == 0.0 && l.linf_bound == 0.0));
    // The weights are fixed, so the codes still carry a weight-induced error.
    assert!(zero.layers[1].epsilon_in > 0.0);
}

#[test]
fn layered_bounds_check_dimensions() {
    let (problem, codes) = two_layer(14);
    assert!(layered_error_bounds(&problem, &codes[..1], &DVector::zeros(10), &[0.5, 0.5]).is_err());
    assert!(layered_error_bounds(&problem, &codes, &DVector::zeros(10), &[0.5]).is_err());
    assert!(layered_error_bounds(&problem, &codes, &DVector::zeros(10), &[0.5, 1.0]).is_err());
}

#[test]
fn p1_two_by_three_example() {
    let s = 0.5_f64.sqrt();
    let d = Dictionary::new(DMatrix::from_row_slice(2, 3, &[1.0, 0.0, s, 0.0, 1.0, s])).unwrap();
    let rep = proposition_p1_conditions(&d, &[0, 1], 1.0, None).unwrap();
    assert!((rep.erc.unwrap() - (1.0 - 2f64.sqrt())).abs() < 1e-12);
    assert!((rep.support_bound - 0.5 * (1.0 + 2f64.sqrt())).abs() < 1e-12);
    assert!(!rep.any_condition());
}

#[test]
fn p1_identity_meets_everything() {
    let d = Dictionary::new(DMatrix::identity(5, 5)).unwrap();
    let p = GroupPartition::contiguous(5, 5).unwrap();
    let spec = RegularizerSpec::uniform(p, NormTag::L2, 1.0).unwrap();
    let rep = proposition_p1_conditions(&d, &[0, 2, 4], 0.7, Some(&spec)).unwrap();
    assert!(rep.max_stripe_condition && rep.support_size_condition && rep.support_stripe_condition);
    assert_eq!(rep.chi_stripe, Some(1));
    assert_eq!(rep.chi_condition, Some(true));
    assert!((rep.erc.unwrap() - 0.7).abs() < 1e-15);
}

#[test]
fn p1_unit_lambda_gives_classic_bound() {
    let d = near_identity(15, 6, 0.1);
    let rep = proposition_p1_conditions(&d, &[1], 1.0, None).unwrap();
    assert!((rep.support_bound - 0.5 * (1.0 + 1.0 / rep.mu)).abs() < 1e-12);
}

/// Atoms supported on two cyclically adjacent rows, so neighborhoods are
/// small and the stripe conditions can hold while the support is large.
fn banded(n: usize, angles: &[f64]) -> Dictionary {
    let mut m = DMatrix::zeros(n, n);
    for (j, a) in angles.iter().enumerate() {
        m[(j, j)] = a.cos();
        m[((j + 1) % n, j)] = a.sin();
    }
    Dictionary::new(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn p1_conditions_imply_positive_erc(
        angles in proptest::collection::vec(-0.45f64..0.45, 8),
        lambda in 0.2f64..1.0,
        mask in proptest::collection::vec(any::<bool>(), 8),
    ) {
        let d = banded(8, &angles);
        let support: Vec<usize> = (0..8).filter(|&j| mask[j]).collect();
        let rep = proposition_p1_conditions(&d, &support, lambda, None).unwrap();
        if rep.any_condition() {
            if let Some(v) = rep.erc {
                prop_assert!(v > 0.0, "erc {v} with {rep:?}");
            }
        }
    }

    #[test]
    fn linf_bound_below_weak_and_monotone(scale in 0.0f64..1.0, c in 0.05f64..0.95, seed in 0u64..50) {
        let mut r = rng(seed);
        let d = unit_dictionary(&mut r, 6, 9);
        let p = GroupPartition::contiguous(9, 3).unwrap();
        let spec = RegularizerSpec::new(
            p.clone(),
            vec![NormTag::L1, NormTag::Elastic(0.4), NormTag::L2],
            vec![0.3, 0.5, 0.9],
        ).unwrap();
        let truth = SparseCode::zeros(&p);
        let e = gaussian_vector(&mut r, 6) * scale;
        let small = check_theorem2(&d, &spec, &truth, &e, c).unwrap();
        let large = check_theorem2(&d, &spec, &truth, &(&e * 2.0), c).unwrap();
        prop_assert!(small.linf_bound >= 0.0);
        prop_assert!(small.linf_bound <= small.weak_linf_bound);
        prop_assert!(large.linf_bound >= small.linf_bound);
        prop_assert!(large.weak_linf_bound >= small.weak_linf_bound);
    }
}

#[test]
fn margin_certificate_thresholds() {
    let w = DVector::from_vec(vec![3.0, 4.0]);
    let clf = LinearClassifier::binary(w).unwrap();
    let m = margin_certificate(0.4, &clf, 4, 0.05);
    assert!((m.spread - 5.0).abs() < 1e-15);
    assert!((m.threshold - 5.0 * 2.0 * 0.05).abs() < 1e-15);
    assert!(!m.certified);
    let zero = margin_certificate(1e-12, &clf, 4, 0.0);
    assert_eq!(zero.threshold, 0.0);
    assert!(zero.certified);

    let weights = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
    let clf = LinearClassifier::new(weights.clone(), DVector::zeros(3)).unwrap();
    let mut spread = 0.0_f64;
    for i in 0..3 {
        for j in 0..3 {
            spread = spread.max((weights.row(i) - weights.row(j)).norm());
        }
    }
    let m = margin_certificate(10.0, &clf, 1, 1.0);
    assert!((m.spread - spread).abs() < 1e-15);
    assert!(m.certified);
}
