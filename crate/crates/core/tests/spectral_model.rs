use amplab_core::spectral_model::{make_spectral_density, DensityTable, SpectralDensity, SpectralFamily, SpectralParams};
use proptest::prelude::*;

fn lattice(n: usize, half: f64, f: impl Fn(f64, f64) -> f64) -> DensityTable {
    let nodes: Vec<f64> = (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect();
    let mut values = vec![];
    for &k in &nodes {
        for &w in &nodes {
            values.push(f(k, w));
        }
    }
    DensityTable { k: nodes.clone(), omega: nodes, values }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_correlation_is_even_and_bounded(sk in 0.2f64..3.0, sw in 0.2f64..3.0, x in -5.0f64..5.0, t in -5.0f64..5.0) {
        let d = SpectralDensity::gaussian_anisotropic(sk, sw).unwrap();
        let c = d.correlation(x, t);
        prop_assert!((c - d.correlation(-x, -t)).abs() < 1e-15);
        prop_assert!(c <= 1.0 && c >= 0.0);
        prop_assert!((d.correlation(0.0, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tabulated_transform_matches_quadrature(x in -3.0f64..3.0, t in -3.0f64..3.0) {
        let table = lattice(9, 2.0, |k, w| (-(k * k + w * w)).exp());
        let d = SpectralDensity::tabulated(table).unwrap();
        let (q, err) = d.correlation_by_quadrature(x, t);
        prop_assert!((d.correlation(x, t) - q).abs() < 1e-8 + 10.0 * err);
    }
}

#[test]
fn moments_match_quadrature() {
    let d = SpectralDensity::gaussian_anisotropic(0.7, 1.9).unwrap();
    for (p, q) in [(0, 0), (2, 0), (0, 2), (1, 1)] {
        assert!((d.moment(p, q) - d.moment_by_quadrature(p, q)).abs() < 1e-8, "({p}, {q})");
    }
    let l = d.lambda_matrix();
    assert!((l.var_x - 0.49).abs() < 1e-12 && (l.var_t - 3.61).abs() < 1e-12);
    assert!(d.normalization_residual() < 1e-12);
}

#[test]
fn family_factory_validates_parameters() {
    let iso = SpectralParams { sigma_k: Some(1.5), ..Default::default() };
    assert_eq!(make_spectral_density(SpectralFamily::GaussianIsotropic, &iso).unwrap().family(), SpectralFamily::GaussianIsotropic);
    let missing = SpectralParams { sigma_k: Some(1.0), ..Default::default() };
    assert!(make_spectral_density(SpectralFamily::GaussianAnisotropic, &missing).is_err());
    assert!(make_spectral_density(SpectralFamily::TabulatedGrid, &SpectralParams::default()).is_err());
    assert!(SpectralDensity::gaussian_isotropic(-1.0).is_err());
}

#[test]
fn tabulated_rejects_bad_tables() {
    let negative = lattice(5, 1.0, |k, _| if k > 0.5 { -1.0 } else { 1.0 });
    assert!(SpectralDensity::tabulated(negative).is_err());
    let lopsided = lattice(5, 1.0, |k, _| if k > 0.0 { 2.0 } else { 1.0 });
    assert!(SpectralDensity::tabulated(lopsided).is_err());
    let zero = lattice(5, 1.0, |_, _| 0.0);
    assert!(SpectralDensity::tabulated(zero).is_err());
}

#[test]
fn density_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut text = String::from("k,omega,density\n");
    let t = lattice(5, 1.0, |k, w| 2.0 - k.abs() - w.abs());
    for (i, k) in t.k.iter().enumerate() {
        for (j, w) in t.omega.iter().enumerate() {
            text += &format!("{k},{w},{}\n", t.values[i * t.omega.len() + j]);
        }
    }
    std::fs::write(&path, text).unwrap();
    let d = SpectralDensity::from_csv(&path).unwrap();
    assert_eq!(d.family(), SpectralFamily::TabulatedGrid);
    assert!((d.correlation(0.0, 0.0) - 1.0).abs() < 1e-12);
    std::fs::write(&path, "k,omega,density\n0,0,1\n1,0,1\n").unwrap();
    assert!(SpectralDensity::from_csv(&path).is_err());
}
