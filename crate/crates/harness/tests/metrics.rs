use histdiff_harness::metrics::{energy_distance, mean_cov, sample_variance};
use proptest::prelude::*;

/// Two sample sets of row length `d`.
fn sets() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1usize..4, 1usize..12, 1usize..12).prop_flat_map(|(d, n, m)| {
        (
            Just(d),
            prop::collection::vec(-5.0f64..5.0, n * d),
            prop::collection::vec(-5.0f64..5.0, m * d),
        )
    })
}

proptest! {
    #[test]
    fn energy_distance_is_non_negative_and_symmetric((d, x, y) in sets()) {
        let a = energy_distance(&x, &y, d);
        prop_assert!(a >= 0.0);
        prop_assert!((a - energy_distance(&y, &x, d)).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn energy_distance_of_a_set_to_itself_is_zero((d, x, _) in sets()) {
        prop_assert!(energy_distance(&x, &x, d) <= 1e-12);
    }

    #[test]
    fn energy_distance_is_translation_invariant((d, x, y) in sets(), shift in -3.0f64..3.0) {
        let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let (a, b) = (energy_distance(&x, &y, d), energy_distance(&xs, &ys, d));
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn sample_variance_is_the_mean_covariance_diagonal((d, x, _) in sets()) {
        let (_, cov) = mean_cov(&x, d);
        let v = sample_variance(&x, d);
        prop_assert!(v >= 0.0);
        prop_assert!((v - cov.trace() / d as f64).abs() <= 1e-12);
    }
}

#[test]
fn energy_distance_of_separated_points() {
    // {0} vs {1} in 1-D: 2·1 − 0 − 0
    assert_eq!(energy_distance(&[0.0], &[1.0], 1), 2.0);
    // {0, 2} vs {1}: 2·1 − (0+2+2+0)/4 − 0 = 1
    assert!((energy_distance(&[0.0, 2.0], &[1.0], 1) - 1.0).abs() < 1e-15);
}
