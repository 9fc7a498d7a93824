use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use vfm_core::lingauss::{diag_inverse_cov, haar_orthogonal, hadamard_gap, LinGaussProblem};
use vfm_core::seeded_rng;

fn problem(seed: u64, d: usize, dy: usize) -> LinGaussProblem {
    LinGaussProblem::random(d, dy, &mut seeded_rng(seed)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Column permutation with sign flips, both drawn from `seed`.
fn signed_permutation(d: usize, seed: u64) -> DMatrix<f64> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    let mut m = DMatrix::zeros(d, d);
    for (col, &row) in order.iter().enumerate() {
        m[(row, col)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimal_objective_is_rotation_invariant(seed in any::<u64>(), d in 1usize..5, dy in 1usize..4) {
        let p = problem(seed, d, dy);
        let value = |q: &DMatrix<f64>| {
            let gen = p.optimal_generator(q).unwrap();
            p.expected_objective(&gen, &p.optimal_adapter(&gen).unwrap()).unwrap()
        };
        let base = value(&DMatrix::identity(d, d));
        let q = haar_orthogonal(d, &mut seeded_rng(seed ^ 1)).unwrap();
        prop_assert!(rel(value(&q), base) < 1e-9);
    }

    #[test]
    fn gap_is_nonnegative_and_vanishes_on_eigenbasis(seed in any::<u64>(), d in 1usize..5, dy in 1usize..4) {
        let p = problem(seed, d, dy);
        let q = haar_orthogonal(d, &mut seeded_rng(seed ^ 2)).unwrap();
        prop_assert!(p.optimality_gap(&q).unwrap() >= -1e-12);
        let v = p.h_eigenbasis().unwrap();
        prop_assert!(p.optimality_gap(&v).unwrap().abs() < 1e-10);
        let vp = &v * signed_permutation(d, seed ^ 3);
        prop_assert!(p.optimality_gap(&vp).unwrap().abs() < 1e-10);
    }

    /// The optimal adapter pushed through `f` reproduces `E[x | y]` for every
    /// rotation of the generator.
    #[test]
    fn pushforward_mean_is_posterior_mean(seed in any::<u64>(), d in 1usize..5, dy in 1usize..4) {
        let p = problem(seed, d, dy);
        let q = haar_orthogonal(d, &mut seeded_rng(seed ^ 4)).unwrap();
        let y = p.sample_observation(&mut seeded_rng(seed ^ 5));
        let err = p.mean_recovery_error(&q, false, &y).unwrap();
        prop_assert!(err <= 1e-8 * (1.0 + p.posterior_mean(&y).unwrap().norm()), "err {err}");
    }

    /// Adapter precision equals `Q^T H Q`, and swapping the optimal
    /// covariance for `diag(P)^-1` costs exactly the Hadamard gap.
    #[test]
    fn diagonal_covariance_costs_the_gap(seed in any::<u64>(), d in 1usize..5, dy in 1usize..4) {
        let p = problem(seed, d, dy);
        let q = haar_orthogonal(d, &mut seeded_rng(seed ^ 6)).unwrap();
        let gen = p.optimal_generator(&q).unwrap();
        let pm = p.p_matrix(&q).unwrap();
        prop_assert!((p.precision(&gen) - &pm).amax() <= 1e-9 * (1.0 + pm.amax()));
        let full = p.optimal_adapter(&gen).unwrap();
        let mut diag = full.clone();
        diag.sigma = diag_inverse_cov(&pm).unwrap();
        let excess = p.expected_objective(&gen, &diag).unwrap() - p.expected_objective(&gen, &full).unwrap();
        let gap = hadamard_gap(&pm).unwrap();
        prop_assert!((excess - gap).abs() <= 1e-8 * (1.0 + gap), "excess {excess} gap {gap}");
    }

    #[test]
    fn optimal_adapter_is_a_minimum(seed in any::<u64>(), d in 1usize..4, dy in 1usize..3, h in 1e-3f64..1e-1) {
        let p = problem(seed, d, dy);
        let gen = p.optimal_generator(&DMatrix::identity(d, d)).unwrap();
        let best = p.optimal_adapter(&gen).unwrap();
        let j0 = p.expected_objective(&gen, &best).unwrap();
        let mut moved = best.clone();
        moved.b += DVector::from_element(d, h);
        moved.k[(0, 0)] -= h;
        moved.sigma *= 1.0 + h;
        prop_assert!(p.expected_objective(&gen, &moved).unwrap() >= j0 - 1e-12 * j0.abs());
    }
}
