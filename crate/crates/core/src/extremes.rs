//! Distribution of the Brownian sup-norm `R = sup_{[0,T]} |B|` and the tail
//! law of the field maximum built on it.
//!
//! The density of `R` has two convergent series: a theta series that is
//! fast for small `r` and its Poisson resummation, fast for large `r`. The
//! switch happens at `r* = √(πT/2)`, where the leading exponents coincide.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use libm::erfc;

use crate::error::{ensure_positive, Error, Result};
use crate::field_synthesis::{check_resolution, synthesize_grid, GridSpec};
use crate::quadrature::integrate_adaptive;
use crate::rng::{self, Purpose};
use crate::spectral_model::{LambdaMatrix, SpectralDensity};

const SERIES_TOL: f64 = 1e-17;
const MAX_TERMS: usize = 10_000;

/// Crossover radius between the two series.
pub fn crossover_radius(duration: f64) -> f64 {
    (PI * duration / 2.0).sqrt()
}

/// Theta-series density of `R` with the number of terms used.
pub fn p_r_theta_terms(r: f64, duration: f64) -> (f64, usize) {
    if r <= 0.0 {
        return (0.0, 0);
    }
    let c = PI * PI * duration / (8.0 * r * r);
    let pre = PI * duration / r.powi(3);
    let mut sum = 0.0;
    for k in 0..MAX_TERMS {
        let j = (2 * k + 1) as f64;
        let term = j * (-c * j * j).exp();
        sum += if k % 2 == 0 { term } else { -term };
        // Alternating with decreasing terms once k is past the peak, so the
        // next term bounds the remainder.
        let jn = j + 2.0;
        let next = jn * (-c * jn * jn).exp();
        if next * pre <= SERIES_TOL * (pre * sum).abs().max(1e-300) && (jn * jn * c) > 0.5 {
            return ((pre * sum).max(0.0), k + 1);
        }
    }
    ((pre * sum).max(0.0), MAX_TERMS)
}

/// Poisson-resummed density of `R` with the number of terms used.
pub fn p_r_poisson_terms(r: f64, duration: f64) -> (f64, usize) {
    if r <= 0.0 {
        return (0.0, 0);
    }
    let c = 2.0 * r * r / duration;
    // Symmetric sum over m ∈ ℤ pairs m with 1 - m, giving twice the m ≥ 1 half.
    let pre = 4.0 * (2.0 / (PI * duration)).sqrt();
    let mut sum = 0.0;
    for m in 1..MAX_TERMS {
        let h = m as f64 - 0.5;
        let term = h * (-c * h * h).exp();
        sum += if m % 2 == 1 { term } else { -term };
        let hn = h + 1.0;
        let next = hn * (-c * hn * hn).exp();
        if next * pre <= SERIES_TOL * (pre * sum).abs().max(1e-300) && hn * hn * c > 0.5 {
            return ((pre * sum).max(0.0), m);
        }
    }
    ((pre * sum).max(0.0), MAX_TERMS)
}

pub fn p_r_theta(r: f64, duration: f64) -> f64 {
    p_r_theta_terms(r, duration).0
}

pub fn p_r_poisson(r: f64, duration: f64) -> f64 {
    p_r_poisson_terms(r, duration).0
}

/// Density of `R`, using whichever series converges faster at `r`.
pub fn p_r(r: f64, duration: f64) -> f64 {
    if r <= crossover_radius(duration) {
        p_r_theta(r, duration)
    } else {
        p_r_poisson(r, duration)
    }
}

/// `P(R < r)`: the probability that a walker started at 0 stays inside
/// `(-r, r)` up to time `T`.
pub fn survival_cdf(r: f64, duration: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let v = if r <= crossover_radius(duration) {
        let c = PI * PI * duration / (8.0 * r * r);
        let mut sum = 0.0;
        for k in 0..MAX_TERMS {
            let j = (2 * k + 1) as f64;
            let term = (-c * j * j).exp() / j;
            sum += if k % 2 == 0 { term } else { -term };
            if term <= SERIES_TOL * sum.abs().max(1e-300) {
                break;
            }
        }
        4.0 / PI * sum
    } else {
        // P(R > r) = 2 Σ_{k≥1} (-1)^{k+1} erfc((2k-1) r / √(2T)).
        let s = r / (2.0 * duration).sqrt();
        let mut tail = 0.0;
        for k in 1..MAX_TERMS {
            let term = erfc((2 * k - 1) as f64 * s);
            tail += if k % 2 == 1 { term } else { -term };
            if term <= SERIES_TOL * tail.abs().max(1e-300) {
                break;
            }
        }
        1.0 - 2.0 * tail
    };
    v.clamp(0.0, 1.0)
}

/// `E[R] = ∫₀^∞ r p_R(r) dr`.
pub fn mean_r(duration: f64) -> Result<f64> {
    ensure_positive("duration", duration)?;
    let s = duration.sqrt();
    // Beyond 12√T the integrand is below e^{-72}.
    let hi = 12.0 * s;
    let split = crossover_radius(duration);
    let a = integrate_adaptive(|r| r * p_r(r, duration), 0.0, split, 0.0, 1e-12)?;
    let b = integrate_adaptive(|r| r * p_r(r, duration), split, hi, 0.0, 1e-12)?;
    Ok(a.value + b.value)
}

/// Sup-norms of `n_paths` random walks with `n_steps` Gaussian steps on `[0, T]`.
pub fn mc_sup_norms(duration: f64, n_paths: usize, n_steps: usize, seed: u64) -> Vec<f64> {
    let sd = (duration / n_steps as f64).sqrt();
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            use rand::Rng;
            let mut rng = rng::stream(seed, Purpose::Paths, i as u64);
            let mut b = 0.0f64;
            let mut sup = 0.0f64;
            for _ in 0..n_steps {
                let z: f64 = rng.sample(StandardNormal);
                b += sd * z;
                sup = sup.max(b.abs());
            }
            sup
        })
        .collect()
}

/// Tail law `p_M(m) ~ A m^{1/2} e^{-m/2}` of the field maximum along paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailLaw {
    pub a: f64,
    pub duration: f64,
    pub det_lambda: f64,
    pub mean_r: f64,
    /// Fraction of `E[R]` coming from radii below the spatial correlation
    /// length, where the large-box asymptote inside the integral is least
    /// trustworthy.
    pub small_r_share: f64,
}

pub fn tail_constant(duration: f64, lambda: &LambdaMatrix) -> Result<TailLaw> {
    ensure_positive("duration", duration)?;
    if !(lambda.det > 0.0) {
        return Err(Error::Domain(format!("det(Lambda) = {} must be positive for the tail law", lambda.det)));
    }
    let mean = mean_r(duration)?;
    let a = duration / PI.powf(1.5) * (lambda.det / 2.0).sqrt() * mean;
    let cutoff = 1.0 / lambda.var_x.sqrt();
    let small = integrate_adaptive(|r| r * p_r(r, duration), 0.0, cutoff.min(12.0 * duration.sqrt()), 1e-300, 1e-10)?.value;
    Ok(TailLaw { a, duration, det_lambda: lambda.det, mean_r: mean, small_r_share: small / mean })
}

/// `A m^{1/2} e^{-m/2}`; an asymptote for large `m`.
pub fn m_tail(m: f64, law: &TailLaw) -> f64 {
    if m <= 0.0 {
        return 0.0;
    }
    law.a * m.sqrt() * (-m / 2.0).exp()
}

/// Leading-order exceedance `P(sup_{[-r,r]×[0,T]} S² > m)`.
pub fn box_max_asymptote(m: f64, r: f64, duration: f64, det_lambda: f64) -> f64 {
    (2.0 * det_lambda).sqrt() / PI.powf(1.5) * r * duration * m.sqrt() * (-m / 2.0).exp()
}

/// Level `m` (above the mode of the asymptote) at which it equals `p`.
pub fn box_max_level(p: f64, r: f64, duration: f64, det_lambda: f64) -> f64 {
    let f = |m: f64| box_max_asymptote(m, r, duration, det_lambda).ln() - p.ln();
    let (mut lo, mut hi) = (1.0, 400.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExtremesMcConfig {
    pub r: f64,
    pub duration: f64,
    pub n_realizations: usize,
    /// Lattice spacing in units of the correlation lengths; at most 1/8.
    pub spacing: f64,
    /// Number of exceedance levels spread log-uniformly over the window.
    pub levels: usize,
    pub window: (f64, f64),
    pub seed: u64,
}

impl Default for ExtremesMcConfig {
    fn default() -> Self {
        ExtremesMcConfig {
            r: 8.0,
            duration: 8.0,
            n_realizations: 10_000,
            spacing: 0.125,
            levels: 5,
            window: (1e-3, 1e-1),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExceedanceRow {
    pub m: f64,
    pub empirical: f64,
    pub asymptote: f64,
    pub count: usize,
    pub log_ratio: f64,
}

/// Empirical exceedance of the lattice maximum of `S²` over
/// `[-r, r] × [0, T]` against the leading-order asymptote.
pub fn mc_field_max_tail(density: &SpectralDensity, cfg: &ExtremesMcConfig) -> Result<Vec<ExceedanceRow>> {
    ensure_positive("r", cfg.r)?;
    ensure_positive("duration", cfg.duration)?;
    if cfg.n_realizations == 0 || cfg.levels == 0 {
        return Err(Error::parameter("n_realizations", "need at least one realization and one level"));
    }
    if !(cfg.spacing > 0.0 && cfg.spacing <= 0.125) {
        return Err(Error::Validation(format!(
            "lattice spacing must be at most 1/8 correlation length, got {}",
            cfg.spacing
        )));
    }
    let lambda = density.lambda_matrix();
    if !(lambda.det > 0.0) {
        return Err(Error::Domain("det(Lambda) must be positive".into()));
    }
    let (lx, lt) = density.correlation_lengths();
    let (dx, dt) = (cfg.spacing * lx, cfg.spacing * lt);
    // Spatial period covers the box plus eight correlation lengths.
    let mut n_x = ((2.0 * cfg.r + 8.0 * lx) / dx).ceil() as usize;
    n_x += n_x % 2;
    let n_t = (cfg.duration / dt).ceil() as usize + 1;
    let grid = GridSpec {
        length: n_x as f64 * dx,
        n_x,
        duration: (n_t - 1) as f64 * dt,
        n_t,
        time_padding: None,
    };
    check_resolution(density, &grid)?;
    let x0 = -0.5 * grid.length;
    let cols: Vec<usize> = (0..n_x).filter(|&j| (x0 + j as f64 * dx).abs() <= cfg.r + 1e-12).collect();
    let rows = ((cfg.duration / dt) + 1e-9).floor() as usize + 1;

    let maxima: Vec<f64> = (0..cfg.n_realizations)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(cfg.seed, Purpose::Lattice, i as u64);
            let (f, _) = synthesize_grid(density, &grid, seed)?;
            let lat = f.as_lattice().expect("lattice");
            let mut best = 0.0f64;
            for n in 0..rows.min(lat.n_t) {
                let row = lat.row(n);
                for &j in &cols {
                    best = best.max(row[j] * row[j]);
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?;

    let (p_hi, p_lo) = (cfg.window.1, cfg.window.0);
    let n = maxima.len() as f64;
    Ok((0..cfg.levels)
        .map(|k| {
            let frac = if cfg.levels == 1 { 0.5 } else { k as f64 / (cfg.levels - 1) as f64 };
            let p = (p_hi.ln() + frac * (p_lo.ln() - p_hi.ln())).exp();
            let m = box_max_level(p, cfg.r, cfg.duration, lambda.det);
            let count = maxima.iter().filter(|&&v| v > m).count();
            let empirical = count as f64 / n;
            let asymptote = box_max_asymptote(m, cfg.r, cfg.duration, lambda.det);
            ExceedanceRow { m, empirical, asymptote, count, log_ratio: (empirical / asymptote).ln() }
        })
        .collect())
}

/// Upper bound on `E[exp(ε g T M)]` or divergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EpsilonBound {
    Finite { value: f64 },
    Divergent,
}

/// Below this level the whole probability mass is bounded by 1; above it
/// the tail law is used.
pub const MATCHING_LEVEL: f64 = 25.0;

pub fn epsilon_moment_bound(g: f64, duration: f64, law: &TailLaw, epsilon: f64) -> Result<EpsilonBound> {
    ensure_positive("g", g)?;
    ensure_positive("duration", duration)?;
    ensure_positive("epsilon", epsilon)?;
    let rate = epsilon * g * duration;
    // ε = 1/(2gT) lands a few ulps either side of 1/2; that is the boundary, where the integral diverges.
    if rate >= 0.5 * (1.0 - 1e-12) {
        return Ok(EpsilonBound::Divergent);
    }
    let c = 0.5 - rate;
    let x = c * MATCHING_LEVEL;
    // ∫_{m0}^∞ m^{1/2} e^{-c m} dm = c^{-3/2} Γ(3/2, c m0).
    let upper_gamma = x.sqrt() * (-x).exp() + 0.5 * PI.sqrt() * erfc(x.sqrt());
    let tail = law.a * upper_gamma / c.powf(1.5);
    Ok(EpsilonBound::Finite { value: (rate * MATCHING_LEVEL).exp() + tail })
}

fn h(s: f64, a: f64) -> Complex64 {
    let j = 2.0 * s + 1.0;
    Complex64::from_polar(1.0, PI * s) * (j * (-a * j * j).exp())
}

/// `ĥ(q, a) = ∫ h(s, a) e^{-2πiqs} ds` in closed form.
pub fn h_hat(q: f64, a: f64) -> Complex64 {
    let u = q - 0.5;
    Complex64::from_polar(1.0, PI * (q + 1.0)) * (0.25 * (PI / a).powf(1.5) * u * (-PI * PI * u * u / (4.0 * a)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoissonPair {
    pub a: f64,
    pub direct: f64,
    pub dual: f64,
    pub direct_imag: f64,
    pub dual_imag: f64,
    pub discrepancy: f64,
}

fn symmetric_sum(f: impl Fn(f64) -> Complex64) -> Complex64 {
    let mut sum = f(0.0);
    for n in 1..MAX_TERMS as i64 {
        let (a, b) = (f(n as f64), f(-n as f64));
        sum += a + b;
        if a.norm() + b.norm() <= SERIES_TOL * sum.norm().max(1e-300) && n > 2 {
            break;
        }
    }
    sum
}

/// Both sides of `Σ_n h(n, a) = Σ_m ĥ(m, a)`.
pub fn poisson_pair_check(a: f64) -> Result<PoissonPair> {
    ensure_positive("a", a)?;
    let direct = symmetric_sum(|s| h(s, a));
    let dual = symmetric_sum(|q| h_hat(q, a));
    Ok(PoissonPair {
        a,
        direct: direct.re,
        dual: dual.re,
        direct_imag: direct.im,
        dual_imag: dual.im,
        discrepancy: (direct - dual).norm(),
    })
}

/// Writes `r,pdf,cdf` rows on a uniform radius grid.
pub fn write_density_csv(path: impl AsRef<Path>, duration: f64, r_max: f64, points: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "r,pdf,cdf")?;
    for i in 1..=points {
        let r = r_max * i as f64 / points as f64;
        writeln!(out, "{r},{},{}", p_r(r, duration), survival_cdf(r, duration))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_exceedance_csv(path: impl AsRef<Path>, rows: &[ExceedanceRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "m,empirical,asymptote")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.m, r.empirical, r.asymptote)?;
    }
    out.flush()?;
    Ok(())
}

/// Large-`r` asymptote of the density, `2√(2/πT) e^{-r²/2T}`.
pub fn p_r_asymptote(r: f64, duration: f64) -> f64 {
    2.0 * (2.0 / (PI * duration)).sqrt() * (-r * r / (2.0 * duration)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_agree_at_unit_radius() {
        let (a, b) = (p_r_theta(1.0, 1.0), p_r_poisson(1.0, 1.0));
        assert!((a - b).abs() < 1e-12 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn survival_at_unit_radius() {
        let want = 4.0 / PI * (0..50).map(|k| {
            let j = (2 * k + 1) as f64;
            (if k % 2 == 0 { 1.0 } else { -1.0 }) / j * (-j * j * PI * PI / 8.0).exp()
        }).sum::<f64>();
        assert!((survival_cdf(1.0, 1.0) - want).abs() < 1e-14);
        assert!((survival_cdf(1.0, 1.0) - 0.3708).abs() < 1e-4);
        // Both CDF forms agree at the crossover.
        let r = crossover_radius(1.0);
        let below = survival_cdf(r * (1.0 - 1e-12), 1.0);
        let above = survival_cdf(r * (1.0 + 1e-12), 1.0);
        assert!((below - above).abs() < 1e-11);
    }

    #[test]
    fn mean_radius_is_sqrt_half_pi() {
        assert!((mean_r(1.0).unwrap() - (PI / 2.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn tail_constant_rejects_degenerate_lambda() {
        let l = LambdaMatrix::new(1.0, 0.0, 0.0);
        assert!(matches!(tail_constant(1.0, &l), Err(Error::Domain(_))));
    }

    #[test]
    fn epsilon_window_edges() {
        let law = tail_constant(1.0, &LambdaMatrix::new(1.0, 1.0, 0.0)).unwrap();
        assert_eq!(epsilon_moment_bound(0.5, 1.0, &law, 1.0).unwrap(), EpsilonBound::Divergent);
        assert!(matches!(epsilon_moment_bound(0.5, 1.0, &law, 0.5).unwrap(), EpsilonBound::Finite { .. }));
    }

    #[test]
    fn poisson_pair_at_unit_a() {
        let p = poisson_pair_check(1.0).unwrap();
        assert!(p.discrepancy <= 1e-12);
        assert!(p.direct_imag.abs() < 1e-12 && p.dual_imag.abs() < 1e-12);
    }
}
