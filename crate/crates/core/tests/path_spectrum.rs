use amplab_core::path_spectrum::{
    amplification_bound, critical_coupling, eigen_spectrum, kernel_matrix, mu1_continuity_probe, path_amplification,
    top_eigenvalue, Amplification, PiecewiseLinearPath,
};
use amplab_core::rng::{stream, Purpose};
use amplab_core::spectral_model::{CorrelationEvaluator, SpectralDensity};
use proptest::prelude::*;

fn evaluator() -> CorrelationEvaluator {
    CorrelationEvaluator::new(SpectralDensity::gaussian_isotropic(1.0).unwrap())
}

fn path_from(seed: u64, t: f64, amp: f64) -> PiecewiseLinearPath {
    let mut rng = stream(seed, Purpose::Probe, 7);
    PiecewiseLinearPath::random_pinned(t, 6, amp, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mu1_is_translation_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let ev = evaluator();
        let p = path_from(seed, 1.5, 1.0);
        let a = top_eigenvalue(&kernel_matrix(&ev, &p, 60).unwrap());
        let b = top_eigenvalue(&kernel_matrix(&ev, &p.translate(shift), 60).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn static_path_dominates(seed in 0u64..1000, amp in 0.01f64..3.0) {
        let ev = evaluator();
        let p = path_from(seed, 1.0, amp);
        let moving = top_eigenvalue(&kernel_matrix(&ev, &p, 80).unwrap());
        let still = top_eigenvalue(&kernel_matrix(&ev, &PiecewiseLinearPath::static_path(1.0), 80).unwrap());
        prop_assert!(moving <= still + 1e-12);
    }

    #[test]
    fn product_stays_below_bound(g_frac in 0.01f64..0.99) {
        let ev = evaluator();
        let spec = eigen_spectrum(&kernel_matrix(&ev, &PiecewiseLinearPath::static_path(2.0), 80).unwrap()).unwrap();
        let g = g_frac / (2.0 * spec.mu1());
        match path_amplification(&spec, g).unwrap() {
            Amplification::Finite { value, .. } => prop_assert!(value >= 1.0 && value <= amplification_bound(&spec, g)),
            Amplification::Divergent => prop_assert!(false, "finite below g_c"),
        }
    }
}

#[test]
fn spectrum_converges_and_diverges_at_critical_coupling() {
    let ev = evaluator();
    let p = PiecewiseLinearPath::static_path(1.0);
    let coarse = eigen_spectrum(&kernel_matrix(&ev, &p, 100).unwrap()).unwrap();
    let fine = eigen_spectrum(&kernel_matrix(&ev, &p, 200).unwrap()).unwrap();
    assert!((coarse.mu1() - fine.mu1()).abs() < 1e-10);
    assert!(fine.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    let g_c = critical_coupling(fine.mu1()).unwrap().g_c;
    assert_eq!(path_amplification(&fine, g_c).unwrap(), Amplification::Divergent);
    assert!(critical_coupling(0.0).is_err());
    assert!(kernel_matrix(&ev, &p, 4).is_err());
}

#[test]
fn mu1_is_continuous_in_the_path() {
    let rows = mu1_continuity_probe(&evaluator(), &PiecewiseLinearPath::static_path(1.0), &[1e-1, 1e-2, 1e-3], 80, 3).unwrap();
    assert!(rows.windows(2).all(|w| w[1].delta_mu1 <= w[0].delta_mu1));
    assert!(rows[2].delta_mu1 < 1e-5);
}

#[test]
fn path_validation_and_csv() {
    assert!(PiecewiseLinearPath::new(vec![0.0, 1.0, 0.5], vec![0.0; 3]).is_err());
    let p = PiecewiseLinearPath::pinned(2.0, &[0.5, -0.5]);
    assert_eq!(p.value(2.0), 0.0);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("p.csv");
    p.write_csv(&file).unwrap();
    assert!(std::fs::read_to_string(file).unwrap().starts_with("t,x\n"));
}
