use ndarray::{Array2, Axis};
use proptest::prelude::*;

use vfm_core::metrics::{median_heuristic, mmd_unbiased};
use vfm_core::problems::{checkerboard_sample, checkerboard_sample_rejection, Checkerboard, LinearOperator};
use vfm_core::seeded_rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn observe_is_linear_for_fixed_noise(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        x1 in prop::collection::vec(-3.0f64..3.0, 3),
        x2 in prop::collection::vec(-3.0f64..3.0, 3),
        xi in prop::collection::vec(-3.0f64..3.0, 2),
        sigma in 0.01f64..2.0,
    ) {
        let op = LinearOperator::new(Array2::from_shape_vec((2, 3), a).unwrap(), sigma, 0).unwrap();
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| p + q).collect();
        let lhs = op.observe_with(&sum, &xi).unwrap();
        let (a1, a2) = (op.apply(&x1).unwrap(), op.apply(&x2).unwrap());
        for k in 0..2 {
            let rhs = a1[k] + a2[k] + sigma * xi[k];
            prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn samplers_are_reproducible(seed in any::<u64>()) {
        prop_assert_eq!(checkerboard_sample(50, &mut seeded_rng(seed)), checkerboard_sample(50, &mut seeded_rng(seed)));
        prop_assert_eq!(
            checkerboard_sample_rejection(50, &mut seeded_rng(seed)),
            checkerboard_sample_rejection(50, &mut seeded_rng(seed))
        );
    }

    #[test]
    fn samples_lie_on_the_board(seed in any::<u64>()) {
        let x = checkerboard_sample(200, &mut seeded_rng(seed));
        for r in x.rows() {
            let cell = Checkerboard::cell_of(&[r[0], r[1]]);
            prop_assert!(matches!(cell, Some((i, j)) if Checkerboard::is_filled(i, j)));
        }
    }
}

/// Filled cells of equal parity are translates of each other: shifting the
/// points of one interior cell onto another gives the same law.
#[test]
fn translated_cells_agree_in_distribution() {
    let x = checkerboard_sample(40_000, &mut seeded_rng(5));
    let pick = |cell: (usize, usize)| -> Array2<f64> {
        let rows: Vec<_> = x
            .axis_iter(Axis(0))
            .filter(|r| Checkerboard::cell_of(&[r[0], r[1]]) == Some(cell))
            .map(|r| r.to_owned())
            .collect();
        ndarray::stack(Axis(0), &rows.iter().map(|r| r.view()).collect::<Vec<_>>()).unwrap()
    };
    let filled = Checkerboard::filled_cells();
    let (src, dst) = (filled[0], *filled.iter().find(|c| c.0 == filled[0].0 + 2 && c.1 == filled[0].1).unwrap());
    let mut a = pick(src);
    a.column_mut(0).mapv_inplace(|v| v + 2.0);
    let b = pick(dst);
    let n = a.nrows().min(b.nrows()).min(2000);
    let (a, b) = (a.slice(ndarray::s![..n, ..]).to_owned(), b.slice(ndarray::s![..n, ..]).to_owned());
    let l = median_heuristic(&a, &b, 0).unwrap();
    let mmd = mmd_unbiased(&a, &b, l).unwrap();
    assert!(mmd.abs() < 4.0 / n as f64, "mmd {mmd} with n = {n}");
}
