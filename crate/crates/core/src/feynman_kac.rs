//! Monte Carlo evaluation of `ψ(x, T) = E[exp(g ∫₀ᵀ S(x(τ), τ)² dτ)]` over
//! Brownian paths pinned at `x(T) = x`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::field_synthesis::SpaceTimeField;
use crate::rng::{self, Purpose};

/// A path on the uniform grid `t_i = i T / n`, with `x(t_n) = endpoint`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub endpoint: f64,
    pub seed: u64,
}

impl PathSample {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }
}

fn fill_backward_path<R: Rng + ?Sized>(x: f64, dt: f64, rng: &mut R, positions: &mut [f64]) {
    // x(τ) = x + B(T - τ): walk B forward from the pinned end.
    let n = positions.len() - 1;
    let sd = dt.sqrt();
    positions[n] = x;
    let mut b = 0.0;
    for i in (0..n).rev() {
        let z: f64 = rng.sample(StandardNormal);
        b += sd * z;
        positions[i] = x + b;
    }
}

/// Draws `x(τ) = x + B(T - τ)` for a standard Brownian motion `B`.
pub fn sample_backward_path(x: f64, duration: f64, n_steps: usize, seed: u64) -> Result<PathSample> {
    ensure_positive("duration", duration)?;
    if n_steps == 0 {
        return Err(Error::parameter("n_steps", "must be >= 1"));
    }
    let dt = duration / n_steps as f64;
    let mut positions = vec![0.0; n_steps + 1];
    let mut rng = rng::stream(seed, Purpose::Paths, 0);
    fill_backward_path(x, dt, &mut rng, &mut positions);
    Ok(PathSample {
        times: (0..=n_steps).map(|i| i as f64 * dt).collect(),
        positions,
        endpoint: x,
        seed,
    })
}

fn trapezoid_action<F: SpaceTimeField + ?Sized>(field: &F, positions: &[f64], dt: f64, stride: usize) -> f64 {
    let n = (positions.len() - 1) / stride;
    let h = dt * stride as f64;
    let mut sum = 0.0;
    for i in 0..=n {
        let s = field.value(positions[i * stride], (i * stride) as f64 * dt);
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        sum += w * s * s;
    }
    sum * h
}

/// `∫₀ᵀ S(x(τ), τ)² dτ` by the trapezoid rule on the path grid.
pub fn path_action<F: SpaceTimeField + ?Sized>(field: &F, path: &PathSample) -> f64 {
    let dt = path.times[1] - path.times[0];
    trapezoid_action(field, &path.positions, dt, 1)
}

/// Monte Carlo estimate of `ψ(x, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FkEstimate {
    pub x: f64,
    pub g: f64,
    pub n_paths: usize,
    pub mean: f64,
    pub se: f64,
    /// Set when `exp(g · action)` overflowed for some path; `mean` and `se`
    /// may then be infinite and `log_mean` carries the estimate.
    pub log_mode: bool,
    pub log_mean: f64,
    /// Largest single summand divided by the sum.
    pub max_share: f64,
    pub seed: u64,
}

/// Settings shared by the estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FkConfig {
    pub duration: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl FkConfig {
    fn validate(&self) -> Result<()> {
        ensure_positive("duration", self.duration)?;
        if self.n_paths < 2 {
            return Err(Error::parameter("n_paths", "must be >= 2"));
        }
        if self.n_steps == 0 {
            return Err(Error::parameter("n_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-path actions on the full grid and, when `n_steps` is even, on every
/// other node of the same paths.
fn actions<F: SpaceTimeField + ?Sized>(field: &F, x: f64, cfg: &FkConfig) -> Vec<(f64, f64)> {
    let dt = cfg.duration / cfg.n_steps as f64;
    let half = cfg.n_steps % 2 == 0;
    (0..cfg.n_paths)
        .into_par_iter()
        .map_init(
            || vec![0.0; cfg.n_steps + 1],
            |positions, i| {
                let mut rng = rng::stream(cfg.seed, Purpose::Paths, i as u64);
                fill_backward_path(x, dt, &mut rng, positions);
                let full = trapezoid_action(field, positions, dt, 1);
                let coarse = if half { trapezoid_action(field, positions, dt, 2) } else { f64::NAN };
                (full, coarse)
            },
        )
        .collect()
}

fn summarize(exponents: &[f64], x: f64, g: f64, seed: u64) -> FkEstimate {
    let n = exponents.len() as f64;
    let (lo, hi) = exponents
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    if lo == hi {
        let mean = hi.exp();
        return FkEstimate {
            x,
            g,
            n_paths: exponents.len(),
            mean,
            se: 0.0,
            log_mode: !mean.is_finite(),
            log_mean: hi,
            max_share: 1.0 / n,
            seed,
        };
    }
    let log_mode = hi > 700.0;
    let shift = if log_mode { hi } else { 0.0 };
    let values: Vec<f64> = exponents.iter().map(|e| (e - shift).exp()).collect();
    let sum: f64 = values.iter().sum();
    let mean = sum / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let max_share = values.iter().cloned().fold(0.0, f64::max) / sum;
    let log_mean = shift + mean.ln();
    FkEstimate {
        x,
        g,
        n_paths: exponents.len(),
        mean: if log_mode { log_mean.exp() } else { mean },
        se: if log_mode { (shift + se.ln()).exp() } else { se },
        log_mode,
        log_mean,
        max_share,
        seed,
    }
}

/// Estimates `ψ(x, T)` from `n_paths` backward paths.
pub fn fk_estimate<F: SpaceTimeField + ?Sized>(field: &F, g: f64, x: f64, cfg: &FkConfig) -> Result<FkEstimate> {
    Ok(fk_sweep(field, &[g], x, cfg)?.remove(0))
}

/// Estimates for several couplings on common paths, so each summand is
/// monotone in `g`.
pub fn fk_sweep<F: SpaceTimeField + ?Sized>(field: &F, gs: &[f64], x: f64, cfg: &FkConfig) -> Result<Vec<FkEstimate>> {
    cfg.validate()?;
    for &g in gs {
        if !(g.is_finite() && g >= 0.0) {
            return Err(Error::parameter("g", format!("must be finite and >= 0, got {g}")));
        }
    }
    let acts = actions(field, x, cfg);
    Ok(gs
        .iter()
        .map(|&g| {
            let e: Vec<f64> = acts.iter().map(|a| g * a.0).collect();
            summarize(&e, x, g, cfg.seed)
        })
        .collect())
}

/// An estimate together with the change caused by halving the number of
/// path steps on the same paths, as a time-discretization error proxy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FkWithDiscretization {
    pub estimate: FkEstimate,
    pub coarse_mean: f64,
    pub discretization: f64,
}

pub fn fk_estimate_with_discretization<F: SpaceTimeField + ?Sized>(
    field: &F,
    g: f64,
    x: f64,
    cfg: &FkConfig,
) -> Result<FkWithDiscretization> {
    cfg.validate()?;
    if cfg.n_steps % 2 != 0 {
        return Err(Error::parameter("n_steps", "must be even for the halving estimate"));
    }
    let acts = actions(field, x, cfg);
    let fine: Vec<f64> = acts.iter().map(|a| g * a.0).collect();
    let coarse: Vec<f64> = acts.iter().map(|a| g * a.1).collect();
    let estimate = summarize(&fine, x, g, cfg.seed);
    let coarse_mean = summarize(&coarse, x, g, cfg.seed).mean;
    Ok(FkWithDiscretization {
        discretization: (estimate.mean - coarse_mean).abs(),
        coarse_mean,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_synthesis::{sample_modes, ConstantField};
    use crate::spectral_model::SpectralDensity;

    fn cfg(n_paths: usize) -> FkConfig {
        FkConfig { duration: 1.0, n_paths, n_steps: 64, seed: 4 }
    }

    #[test]
    fn path_is_pinned_at_endpoint() {
        let p = sample_backward_path(0.7, 2.0, 10, 1).unwrap();
        assert_eq!(*p.positions.last().unwrap(), 0.7);
        assert_eq!(p.n_steps(), 10);
        assert!(sample_backward_path(0.0, 1.0, 0, 1).is_err());
    }

    #[test]
    fn constant_field_action_and_estimate() {
        let p = sample_backward_path(0.0, 1.0, 37, 2).unwrap();
        assert!((path_action(&ConstantField(2.0), &p) - 4.0).abs() < 1e-12);
        let est = fk_estimate(&ConstantField(1.5), 0.2, 0.0, &cfg(100)).unwrap();
        assert!((est.mean - (0.2f64 * 2.25).exp()).abs() < 1e-12);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn zero_coupling_gives_one_exactly() {
        let d = SpectralDensity::gaussian_isotropic(1.0).unwrap();
        let f = sample_modes(&d, 32, 1).unwrap();
        let est = fk_estimate(&f, 0.0, 0.3, &cfg(200)).unwrap();
        assert_eq!((est.mean, est.se), (1.0, 0.0));
    }

    #[test]
    fn sweep_is_monotone_and_reproducible() {
        let d = SpectralDensity::gaussian_isotropic(1.0).unwrap();
        let f = sample_modes(&d, 32, 1).unwrap();
        let a = fk_sweep(&f, &[0.1, 0.2, 0.4], 0.0, &cfg(300)).unwrap();
        let b = fk_sweep(&f, &[0.1, 0.2, 0.4], 0.0, &cfg(300)).unwrap();
        assert_eq!(a, b);
        assert!(a[0].mean < a[1].mean && a[1].mean < a[2].mean);
    }

    #[test]
    fn overflow_switches_to_log_mode() {
        let est = fk_estimate(&ConstantField(40.0), 1.0, 0.0, &cfg(10)).unwrap();
        assert!(est.log_mode);
        assert!((est.log_mean - 1600.0).abs() < 1e-9);
    }
}
