use std::f64::consts::PI;

use amplab_core::extremes::{
    box_max_asymptote, box_max_level, crossover_radius, h_hat, mean_r, p_r, p_r_poisson, p_r_theta, survival_cdf,
};
use amplab_core::quadrature::integrate_adaptive;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cdf_is_monotone_and_density_nonnegative(t in 0.1f64..10.0, a in 0.01f64..6.0, b in 0.01f64..6.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let s = t.sqrt();
        prop_assert!(survival_cdf(lo * s, t) <= survival_cdf(hi * s, t));
        prop_assert!(p_r(lo * s, t) >= 0.0);
    }

    #[test]
    fn series_forms_agree(t in 0.1f64..10.0, u in 0.2f64..5.0) {
        let r = u * t.sqrt();
        prop_assert!((p_r_theta(r, t) - p_r_poisson(r, t)).abs() <= 1e-12 / t.sqrt());
    }
}

#[test]
fn density_is_normalized_with_known_mean() {
    for t in [0.5, 1.0, 3.0] {
        let split = crossover_radius(t);
        let a = integrate_adaptive(|r| p_r(r, t), 0.0, split, 0.0, 1e-13).unwrap().value;
        let b = integrate_adaptive(|r| p_r(r, t), split, 12.0 * t.sqrt(), 0.0, 1e-13).unwrap().value;
        assert!((a + b - 1.0).abs() < 1e-8);
        assert!((mean_r(t).unwrap() - (PI * t / 2.0).sqrt()).abs() < 1e-9);
    }
    assert!(survival_cdf(1e-3, 1.0) < 1e-100);
    assert!((survival_cdf(20.0, 1.0) - 1.0).abs() < 1e-15);
}

#[test]
fn fourier_pair_matches_quadrature() {
    // ĥ(q) = ∫ h(s) e^{-2πiqs} ds, checked by direct integration.
    let a = 0.7;
    for q in [-1.0, 0.0, 0.5, 2.0] {
        let re = integrate_adaptive(
            |s: f64| {
                let j = 2.0 * s + 1.0;
                (PI * s - 2.0 * PI * q * s).cos() * j * (-a * j * j).exp()
            },
            -12.0,
            12.0,
            1e-13,
            1e-12,
        )
        .unwrap()
        .value;
        assert!((re - h_hat(q, a).re).abs() < 1e-10, "q = {q}");
    }
}

#[test]
fn box_level_inverts_asymptote() {
    for p in [1e-3, 1e-2, 1e-1] {
        let m = box_max_level(p, 4.0, 8.0, 1.0);
        assert!((box_max_asymptote(m, 4.0, 8.0, 1.0) / p - 1.0).abs() < 1e-9);
    }
}
