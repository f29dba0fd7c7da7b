mod common;

use common::systems::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wqms_core::control::*;
use wqms_core::linalg::numerical_rank;

fn gramian_rank(w: &DMatrix<f64>, c: &DMatrix<f64>) -> usize {
    let top = c.singular_values().max();
    numerical_rank(w, top * top)
}

#[test]
fn gramian_is_reach_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=n);
        let horizon = rng.gen_range(1..=6);
        let (a, b) = with_controllable_dim(&mut rng, n, m, k);
        let c = controllability_matrix(&a, &b, horizon);
        let w = gramian(&a, &b, horizon);
        let cc = &c * c.transpose();
        assert!((&w - &cc).norm() <= 1e-10 * cc.norm().max(1e-300));
        assert_eq!(
            gramian_rank(&w, &c),
            sampled_reach_rank(&mut rng, &a, &b, horizon)
        );
    }
}

#[test]
fn decomposition_recovers_known_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 1..=5 {
        for _ in 0..4 {
            let n = k + rng.gen_range(0..=3);
            let m = rng.gen_range(1..=2);
            let (a, b) = with_controllable_dim(&mut rng, n, m, k);
            let d = controllable_decomposition(&a, &b);
            assert_eq!(d.controllable, k, "n={n} m={m}");
            // Lower-left block vanishes in the new coordinates.
            let (at, bt) = d.apply(&a, &b);
            assert!(at.view((k, 0), (n - k, k)).amax() < 1e-9);
            assert!(bt.rows(k, n - k).amax() < 1e-9);
        }
    }
}

#[test]
fn controllable_gramian_trace_survives_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 1..=5 {
        let n = k + 2;
        let (a, b) = with_controllable_dim(&mut rng, n, 1, k);
        let s = orthogonal(&mut rng, n);
        let (a2, b2) = (&s * &a * s.transpose(), &s * &b);
        let trace = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let d = controllable_decomposition(a, b);
            let (ac, bc) = d.controllable_part(a, b);
            gramian(&ac, &bc, 6).trace()
        };
        let (t1, t2) = (trace(&a, &b), trace(&a2, &b2));
        assert!((t1 - t2).abs() <= 1e-8 * t1.abs().max(1.0), "{t1} {t2}");
    }
}

#[test]
fn target_gramian_selects_rows_and_columns() {
    let w = DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
    let t = target_gramian(&w, &[3, 1]);
    assert_eq!(t, DMatrix::from_row_slice(2, 2, &[15.0, 13.0, 7.0, 5.0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gramian_is_symmetric_psd(seed in any::<u64>(), n in 1usize..7, horizon in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(&mut rng, n, n) * 0.5;
        let b = gaussian(&mut rng, n, 2);
        let w = gramian(&a, &b, horizon);
        prop_assert!((&w - w.transpose()).amax() <= 1e-12 * w.amax().max(1.0));
        let min = w.clone().symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-9 * w.amax().max(1.0));
    }

    #[test]
    fn longer_horizon_never_loses_rank(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=n);
        let (a, b) = with_controllable_dim(&mut rng, n, 1, k);
        let mut last = 0;
        for h in 1..=n {
            let c = controllability_matrix(&a, &b, h);
            let r = gramian_rank(&gramian(&a, &b, h), &c);
            prop_assert!(r >= last && r <= k);
            last = r;
        }
        prop_assert_eq!(last, k);
    }

    #[test]
    fn decomposition_finds_the_planted_dimension(seed in any::<u64>(), k in 1usize..6, extra in 0usize..4, m in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = with_controllable_dim(&mut rng, k + extra, m, k);
        prop_assert_eq!(controllable_decomposition(&a, &b).controllable, k);
    }

    #[test]
    fn inverse_weights_are_a_distribution(scores in prop::collection::vec(0.0f64..1e3, 1..6)) {
        for mapping in [WeightMapping::Literal, WeightMapping::Inverse] {
            let r = r_from_scores(&scores, mapping);
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|v| *v >= 0.0));
        }
    }
}
