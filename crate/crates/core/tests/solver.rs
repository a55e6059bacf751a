mod common;

use common::*;
use groupsparse::dictionary::{GroupPartition, NormTag, RegularizerSpec};
use groupsparse::solver::{
    optimality_residual, prox_step, prox_step_nonneg, rewrite_block_system, rewrite_single_layer,
    rewritten_coherence_closed_form, solve_gbp, solve_layered, solve_positive_gbp, BlockSystem,
    GbpSolver, LayeredProblem, SolveOptions,
};
use groupsparse::{dictionary::mutual_coherence, Dictionary, Error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn mixed_spec(m: usize, size: usize, seed: u64) -> RegularizerSpec {
    let mut r = rng(seed);
    let p = GroupPartition::contiguous(m, size).unwrap();
    let g = p.n_groups();
    let tags = (0..g)
        .map(|i| match i % 3 {
            0 => NormTag::L1,
            1 => NormTag::L2,
            _ => NormTag::Elastic(uniform(&mut r, 0.2, 0.8)),
        })
        .collect();
    let weights = (0..g).map(|_| uniform(&mut r, 0.2, 0.6)).collect();
    RegularizerSpec::new(p, tags, weights).unwrap()
}

#[test]
fn lasso_matches_coordinate_descent() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let d = unit_dictionary(&mut r, 20, 40);
        let x = gaussian_vector(&mut r, 20);
        let w: Vec<f64> = (0..40).map(|_| uniform(&mut r, 0.05, 0.5)).collect();
        let spec = RegularizerSpec::new(GroupPartition::singletons(40), vec![NormTag::L1; 40], w.clone()).unwrap();
        let res = solve_gbp(&x, &d, &spec, &SolveOptions::default().with_residual_tol(1e-12)).unwrap();
        assert!(res.converged);
        let oracle = lasso_coordinate_descent(&x, d.matrix(), &w);
        assert!(linf_diff(&res.code.values, &oracle) < 1e-8, "seed {seed}");
    }
}

#[test]
fn orthonormal_dictionary_reduces_to_prox() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let q = orthogonal(&mut r, 12);
        let d = Dictionary::new(q.clone()).unwrap();
        let spec = mixed_spec(12, 3, seed);
        let x = gaussian_vector(&mut r, 12) * 2.0;
        let expected = prox_step(&q.tr_mul(&x), &spec, 1.0).unwrap();
        let res = solve_gbp(&x, &d, &spec, &SolveOptions::default()).unwrap();
        assert!(res.converged);
        assert!(linf_diff(&res.code.values, &expected) < 1e-7);
        let expected = prox_step_nonneg(&q.tr_mul(&x), &spec, 1.0).unwrap();
        let res = solve_positive_gbp(&x, &d, &spec, &SolveOptions::default()).unwrap();
        assert!(linf_diff(&res.code.values, &expected) < 1e-7);
    }
}

#[test]
fn large_weight_gives_zero_code() {
    let mut r = rng(7);
    let d = unit_dictionary(&mut r, 10, 20);
    let x = gaussian_vector(&mut r, 10);
    let corr = d.matrix().tr_mul(&x).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let spec = RegularizerSpec::uniform(GroupPartition::singletons(20), NormTag::L1, corr * 1.001).unwrap();
    let res = solve_gbp(&x, &d, &spec, &SolveOptions::default()).unwrap();
    assert!(res.code.support.is_empty());
    assert!(res.converged);
    assert_eq!(res.iterations, 0);
}

#[test]
fn reported_objective_and_residual_are_consistent() {
    for seed in 0..5 {
        let mut r = rng(200 + seed);
        let d = unit_dictionary(&mut r, 15, 30);
        let spec = mixed_spec(30, 3, seed);
        let x = gaussian_vector(&mut r, 15);
        for nonneg in [false, true] {
            let opts = SolveOptions { nonnegative: nonneg, ..SolveOptions::default() };
            let res = solve_gbp(&x, &d, &spec, &opts).unwrap();
            assert!(res.converged, "seed {seed} nonneg {nonneg}");
            let obj = spec.objective(&x, &d, &res.code.values);
            assert!((obj - res.objective).abs() <= 1e-10 * obj.abs().max(1.0));
            let resid = optimality_residual(&x, &d, &res.code.values, &spec, nonneg).unwrap();
            assert!(resid <= 1e-7 * (1.0 + x.norm()));
            if nonneg {
                assert!(res.code.values.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn plain_and_accelerated_iterations_agree() {
    let mut r = rng(11);
    let d = unit_dictionary(&mut r, 15, 30);
    let spec = mixed_spec(30, 3, 4);
    let x = gaussian_vector(&mut r, 15);
    let fast = solve_gbp(&x, &d, &spec, &SolveOptions::default().with_residual_tol(1e-11)).unwrap();
    let slow = solve_gbp(
        &x,
        &d,
        &spec,
        &SolveOptions { acceleration: false, max_iter: 200_000, ..SolveOptions::default().with_residual_tol(1e-11) },
    )
    .unwrap();
    assert!(fast.iterations < slow.iterations);
    assert!(linf_diff(&fast.code.values, &slow.code.values) < 1e-8);
}

#[test]
fn warm_start_at_solution_is_a_fixed_point() {
    let mut r = rng(12);
    let d = unit_dictionary(&mut r, 15, 30);
    let spec = mixed_spec(30, 3, 5);
    let x = gaussian_vector(&mut r, 15);
    let solver = GbpSolver::new(&d, &spec, SolveOptions::default().with_residual_tol(1e-12)).unwrap();
    let a = solver.solve(&x).unwrap();
    let b = solver.solve_from(&x, &a.code.values).unwrap();
    assert!(b.iterations <= 10);
    assert!(linf_diff(&a.code.values, &b.code.values) < 1e-10);
}

#[test]
fn iteration_cap_reports_not_converged() {
    let mut r = rng(13);
    let d = unit_dictionary(&mut r, 15, 30);
    let spec = mixed_spec(30, 3, 6);
    let x = gaussian_vector(&mut r, 15);
    let res = solve_gbp(&x, &d, &spec, &SolveOptions::default().with_max_iter(2)).unwrap();
    assert!(!res.converged);
    assert_eq!(res.iterations, 2);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let mut r = rng(14);
    let d = unit_dictionary(&mut r, 5, 8);
    let spec = RegularizerSpec::uniform(GroupPartition::singletons(8), NormTag::L1, 0.1).unwrap();
    assert!(matches!(
        solve_gbp(&DVector::zeros(4), &d, &spec, &SolveOptions::default()),
        Err(Error::DimensionMismatch(_))
    ));
    let spec = RegularizerSpec::uniform(GroupPartition::singletons(7), NormTag::L1, 0.1).unwrap();
    assert!(solve_gbp(&DVector::zeros(5), &d, &spec, &SolveOptions::default()).is_err());
}

#[test]
fn layered_solve_feeds_codes_forward() {
    let mut r = rng(15);
    let d1 = unit_dictionary(&mut r, 10, 12);
    let d2 = unit_dictionary(&mut r, 12, 14);
    let s1 = RegularizerSpec::uniform(GroupPartition::singletons(12), NormTag::L1, 0.05).unwrap();
    let s2 = RegularizerSpec::uniform(GroupPartition::contiguous(14, 2).unwrap(), NormTag::L2, 0.05).unwrap();
    let problem = LayeredProblem::new(vec![(d1.clone(), s1.clone()), (d2.clone(), s2.clone())]).unwrap();
    let x = gaussian_vector(&mut r, 10);
    let out = solve_layered(&x, &problem, &SolveOptions::default()).unwrap();
    let first = solve_gbp(&x, &d1, &s1, &SolveOptions::default()).unwrap();
    assert_eq!(out[0].code, first.code);
    let second = solve_gbp(&first.code.values, &d2, &s2, &SolveOptions::default()).unwrap();
    assert_eq!(out[1].code, second.code);
    assert!(LayeredProblem::new(vec![(d2, s2), (d1, s1)]).is_err());
}

fn random_layered(seed: u64, depth: usize) -> LayeredProblem {
    let mut r = rng(seed);
    let sizes = [8, 10, 12, 14];
    let mut layers = Vec::new();
    for j in 0..depth {
        let d = unit_dictionary(&mut r, sizes[j], sizes[j + 1]);
        let spec = mixed_spec(sizes[j + 1], 2, seed * 10 + j as u64);
        layers.push((d, spec));
    }
    LayeredProblem::new(layers).unwrap()
}

#[test]
fn rewritten_problem_is_equivalent_to_block_problem() {
    for (seed, depth) in [(1u64, 2usize), (2, 3), (3, 2), (4, 3)] {
        let problem = random_layered(seed, depth);
        let rw = rewrite_single_layer(&problem).unwrap();
        assert!(rw.dictionary.is_unit_normed());
        let mut r = rng(seed + 50);
        let x = rw.layered_signal(&gaussian_vector(&mut r, 8)).unwrap();
        let res = solve_gbp(&x, &rw.dictionary, &rw.spec, &SolveOptions::default().with_residual_tol(1e-12)).unwrap();
        let blocks = rw.recover_original(&res.code.values).unwrap();
        let original: Vec<f64> = blocks.iter().flat_map(|b| b.iter().cloned()).collect();
        let original = DVector::from_vec(original);
        let direct = rw.original_objective(&x, &original);
        assert!((direct - res.objective).abs() <= 1e-8 * direct.abs().max(1.0));
        // The mapped solution is optimal for the unnormalized problem too.
        let raw = Dictionary::new(rw.original_matrix.clone()).unwrap();
        let resid = optimality_residual(&x, &raw, &original, &rw.original_spec, false).unwrap();
        assert!(resid < 1e-9);
        // Scale map: sqrt(2) on the first K-1 blocks, 1 on the last.
        let last = problem.dictionary(depth - 1).n_atoms();
        let n = rw.scale_map.len();
        assert!(rw.scale_map.rows(0, n - last).iter().all(|s| (s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15));
        assert!(rw.scale_map.rows(n - last, last).iter().all(|s| (s - 1.0).abs() < 1e-15));
    }
}

#[test]
fn rewritten_coherence_matches_closed_form() {
    for seed in 0..6 {
        let problem = random_layered(300 + seed, 2 + (seed as usize % 2));
        let rw = rewrite_single_layer(&problem).unwrap();
        let mu = mutual_coherence(&rw.dictionary).unwrap().absolute;
        assert!((mu - rewritten_coherence_closed_form(&problem).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn last_layer_cross_term_carries_inverse_sqrt_two() {
    // D_1 = D_2 = I: the only nonzero inner products are the -I / D_2 cross
    // terms, equal to 1/sqrt(2), not 1/2.
    let eye = Dictionary::new(DMatrix::identity(2, 2)).unwrap();
    let spec = RegularizerSpec::uniform(GroupPartition::singletons(2), NormTag::L1, 1.0).unwrap();
    let problem = LayeredProblem::new(vec![(eye.clone(), spec.clone()), (eye, spec)]).unwrap();
    let rw = rewrite_single_layer(&problem).unwrap();
    let mu = mutual_coherence(&rw.dictionary).unwrap().absolute;
    assert!((mu - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
}

#[test]
fn skip_connections_with_unequal_group_norms_are_rejected() {
    let mut r = rng(21);
    let d1 = unit_dictionary(&mut r, 4, 4);
    let d2 = unit_dictionary(&mut r, 4, 4);
    let l1 = RegularizerSpec::uniform(GroupPartition::singletons(4), NormTag::L1, 1.0).unwrap();
    let l2 = RegularizerSpec::uniform(GroupPartition::contiguous(4, 2).unwrap(), NormTag::L2, 1.0).unwrap();
    // Skip block under only the first two columns of block 0 breaks the
    // common norm of the first L2 group {0, 1}? No: it touches columns 0 and 1
    // equally. Touch column 0 only.
    let mut skip = DMatrix::zeros(4, 4);
    skip[(0, 0)] = 1.0;
    let mut sys = BlockSystem::new(vec![4, 4], vec![l2.clone(), l1.clone()]);
    sys.set_block(0, 0, d1.matrix().clone()).unwrap();
    sys.set_block(1, 0, skip.clone()).unwrap();
    sys.set_block(1, 1, d2.matrix().clone()).unwrap();
    assert!(matches!(rewrite_block_system(&sys), Err(Error::InvalidStructure(_))));
    // The same skip under an L1-tagged block is fine: the group splits.
    let mut sys = BlockSystem::new(vec![4, 4], vec![l1.clone(), l1]);
    sys.set_block(0, 0, d1.matrix().clone()).unwrap();
    sys.set_block(1, 0, skip).unwrap();
    sys.set_block(1, 1, d2.matrix().clone()).unwrap();
    assert!(rewrite_block_system(&sys).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prox_output_solves_its_own_problem(
        vals in proptest::collection::vec(-3.0f64..3.0, 8),
        step in 0.05f64..2.0,
        seed in 0u64..1000,
    ) {
        let spec = mixed_spec(8, 2, seed);
        let v = DVector::from_vec(vals);
        let eye = Dictionary::new(DMatrix::identity(8, 8)).unwrap();
        let scaled = spec.scaled(step).unwrap();
        for nonneg in [false, true] {
            let u = if nonneg { prox_step_nonneg(&v, &spec, step) } else { prox_step(&v, &spec, step) }.unwrap();
            let r = optimality_residual(&v, &eye, &u, &scaled, nonneg).unwrap();
            prop_assert!(r < 1e-12);
        }
    }

    #[test]
    fn prox_is_nonexpansive(
        a in proptest::collection::vec(-3.0f64..3.0, 8),
        b in proptest::collection::vec(-3.0f64..3.0, 8),
        seed in 0u64..1000,
    ) {
        let spec = mixed_spec(8, 4, seed);
        let (a, b) = (DVector::from_vec(a), DVector::from_vec(b));
        let pa = prox_step(&a, &spec, 0.7).unwrap();
        let pb = prox_step(&b, &spec, 0.7).unwrap();
        prop_assert!((pa - pb).norm() <= (a - b).norm() + 1e-12);
    }
}
