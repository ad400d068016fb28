//! Ergodicity and intermittency diagnostics on terminal profiles `E(x, g)`,
//! and the heavy-tailed i.i.d. sample-mean demonstrator.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::field_synthesis::{synthesize_grid, GridSpec};
use crate::heat_solver::{solve, Scheme, SolveOptions, SolverGrid};
use crate::rng::{self, Purpose};
use crate::spectral_model::SpectralDensity;

/// Terminal profile on the uniform grid `x_j = x0 + j dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub x0: f64,
    pub dx: f64,
    pub values: Vec<f64>,
}

impl Profile {
    pub fn new(x0: f64, dx: f64, values: Vec<f64>) -> Self {
        Profile { x0, dx, values }
    }

    /// Node range and trapezoid weights covering `[-L/2, L/2]`.
    fn window(&self, length: f64) -> (usize, usize) {
        let half = 0.5 * length;
        let lo = ((-half - self.x0) / self.dx - 1e-9).ceil().max(0.0) as usize;
        let hi = (((half - self.x0) / self.dx + 1e-9).floor() as usize).min(self.values.len() - 1);
        (lo, hi)
    }

    /// Trapezoid integral of `f(E)` over the window, with the covered span.
    fn integrate(&self, length: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
        let (lo, hi) = self.window(length);
        if hi <= lo {
            return (f(self.values[lo]), 1.0);
        }
        let mut sum = 0.5 * (f(self.values[lo]) + f(self.values[hi]));
        for &v in &self.values[lo + 1..hi] {
            sum += f(v);
        }
        (sum * self.dx, (hi - lo) as f64 * self.dx)
    }
}

/// `I_L / L`, the window average of the profile.
pub fn spatial_average(profile: &Profile, length: f64) -> f64 {
    let (sum, span) = profile.integrate(length, |e| e);
    sum / span
}

/// `(1/L) ∫ E^ε dx`.
pub fn epsilon_moment_average(profile: &Profile, length: f64, epsilon: f64) -> f64 {
    let (sum, span) = profile.integrate(length, |e| e.powf(epsilon));
    sum / span
}

/// Sublinear transform applied to the running infimum of averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Phi {
    /// `φ(u) = u^p` with `0 < p < 1`.
    Power { exponent: f64 },
}

/// Default exponent of `φ(u) = u^p`.
pub const DEFAULT_PHI_EXPONENT: f64 = 0.9;
/// Default largest window, in correlation lengths of `C` in x.
pub const DEFAULT_L_MAX_CORRELATION_LENGTHS: f64 = 1024.0;

impl Default for Phi {
    fn default() -> Self {
        Phi::Power { exponent: DEFAULT_PHI_EXPONENT }
    }
}

impl Phi {
    pub fn sqrt() -> Self {
        Phi::Power { exponent: 0.5 }
    }

    pub fn apply(&self, u: f64) -> f64 {
        match self {
            Phi::Power { exponent } => u.powf(*exponent),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Phi::Power { exponent } if *exponent > 0.0 && *exponent < 1.0 => Ok(()),
            Phi::Power { exponent } => Err(Error::parameter("phi_exponent", format!("must lie in (0, 1), got {exponent}"))),
        }
    }
}

/// `f(L_i) = φ(min_{j ≥ i} avg_j)` for averages listed by increasing `L`.
pub fn f_of_l(averages: &[f64], phi: &Phi) -> Vec<f64> {
    let mut out = vec![0.0; averages.len()];
    let mut running = f64::INFINITY;
    for i in (0..averages.len()).rev() {
        running = running.min(averages[i]);
        out[i] = phi.apply(running);
    }
    out
}

/// Peak share `ρ` and occupancy `φ` of the part of the window where `E > f`.
pub fn truncated_stats(profile: &Profile, length: f64, f: f64) -> (f64, f64) {
    let (total, span) = profile.integrate(length, |e| e);
    let (peak, _) = profile.integrate(length, |e| if e > f { e } else { 0.0 });
    let (count, _) = profile.integrate(length, |e| if e > f { 1.0 } else { 0.0 });
    let rho = if total > 0.0 { (peak / total).clamp(0.0, 1.0) } else { 0.0 };
    (rho, (count / span).clamp(0.0, 1.0))
}

/// `max |X|^p / Σ |X|^p`.
pub fn max_to_sum(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::parameter("samples", "must be nonempty"));
    }
    let powered: Vec<f64> = samples.iter().map(|x| x.abs().powf(p)).collect();
    let sum: f64 = powered.iter().sum();
    let max = powered.iter().cloned().fold(0.0, f64::max);
    Ok(if sum > 0.0 { max / sum } else { 1.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SubcriticalLike,
    SupercriticalLike,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Relative change of the average over the top octave counted as stable.
    pub theta1: f64,
    /// Peak share above which the average is peak-carried.
    pub theta2: f64,
    /// Occupancy below which the peaks are sparse.
    pub theta3: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { theta1: 0.1, theta2: 0.5, theta3: 0.1 }
    }
}

/// One row of a realization's curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub l: f64,
    pub avg: f64,
    pub f: f64,
    pub rho: f64,
    pub phi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Decision {
    /// `|avg(L_max) / avg(L_max / 2) - 1|`.
    pub top_octave_change: f64,
    /// `avg(L_max) / min_L avg(L)`.
    pub growth: f64,
    pub rho_max: f64,
    pub phi_max: f64,
    pub regime: Regime,
}

/// Classifies one realization from its curve (rows ordered by increasing `L`).
///
/// Subcritical-like: the average is stable over the top octave and the
/// largest window is not carried by sparse peaks. Supercritical-like: the
/// average has not settled (it still moves over the top octave, or sits
/// above its smallest value across windows) and the largest window is
/// carried by sparse peaks.
pub fn classify(curve: &[CurveRow], th: &Thresholds) -> Decision {
    let last = curve[curve.len() - 1];
    let prev = curve[curve.len().saturating_sub(2)];
    let top_octave_change = (last.avg / prev.avg - 1.0).abs();
    let lowest = curve.iter().map(|c| c.avg).fold(f64::INFINITY, f64::min);
    let growth = last.avg / lowest;
    let stable = top_octave_change < th.theta1;
    let growing = !stable || growth >= 1.0 + th.theta1;
    let peak = last.rho > th.theta2 && last.phi < th.theta3;
    let regime = if stable && !peak {
        Regime::SubcriticalLike
    } else if growing && peak {
        Regime::SupercriticalLike
    } else {
        Regime::Inconclusive
    };
    Decision { top_octave_change, growth, rho_max: last.rho, phi_max: last.phi, regime }
}

/// Curve, ε-moment averages and decision for one profile.
pub fn analyze_profile(
    profile: &Profile,
    lengths: &[f64],
    phi: &Phi,
    epsilons: &[f64],
    th: &Thresholds,
) -> (Vec<CurveRow>, Vec<Vec<f64>>, Decision) {
    let avgs: Vec<f64> = lengths.iter().map(|&l| spatial_average(profile, l)).collect();
    let fs = f_of_l(&avgs, phi);
    let curve: Vec<CurveRow> = lengths
        .iter()
        .zip(avgs.iter().zip(&fs))
        .map(|(&l, (&avg, &f))| {
            let (rho, occ) = truncated_stats(profile, l, f);
            CurveRow { l, avg, f, rho, phi: occ }
        })
        .collect();
    let eps: Vec<Vec<f64>> = epsilons
        .iter()
        .map(|&e| lengths.iter().map(|&l| epsilon_moment_average(profile, l, e)).collect())
        .collect();
    let decision = classify(&curve, th);
    (curve, eps, decision)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub duration: f64,
    pub couplings: Vec<f64>,
    /// Window lengths, increasing; the top octave is the last pair.
    pub lengths: Vec<f64>,
    pub realizations: usize,
    /// Lattice spacing in x, shared by field and solver.
    pub dx: f64,
    /// Time step of the synthesized field lattice.
    pub field_dt: f64,
    /// Solver steps over `[0, T]`; `None` applies the default step rule.
    pub solver_steps: Option<usize>,
    /// Padding added around the largest window, in correlation lengths.
    pub margin: f64,
    pub phi: Phi,
    pub thresholds: Thresholds,
    pub epsilons: Vec<f64>,
    pub seed: u64,
}

impl ScanConfig {
    /// Default ensemble: 32 realizations, windows from 8 correlation lengths
    /// up to `DEFAULT_L_MAX_CORRELATION_LENGTHS`, `dx = ℓ_x/8`.
    pub fn with_defaults(density: &SpectralDensity, duration: f64, couplings: Vec<f64>, seed: u64) -> Self {
        let (lx, lt) = density.correlation_lengths();
        ScanConfig {
            duration,
            couplings,
            lengths: Self::geometric_lengths(8.0 * lx, DEFAULT_L_MAX_CORRELATION_LENGTHS * lx),
            realizations: 32,
            dx: lx / 8.0,
            field_dt: lt / 16.0,
            solver_steps: None,
            margin: 8.0,
            phi: Phi::default(),
            thresholds: Thresholds::default(),
            epsilons: vec![0.25, 0.5],
            seed,
        }
    }

    /// Geometric windows `8, 16, ..., l_max`.
    pub fn geometric_lengths(l_min: f64, l_max: f64) -> Vec<f64> {
        let mut out = vec![];
        let mut l = l_min;
        while l <= l_max * (1.0 + 1e-12) {
            out.push(l);
            l *= 2.0;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("duration", self.duration)?;
        ensure_positive("dx", self.dx)?;
        ensure_positive("field_dt", self.field_dt)?;
        self.phi.validate()?;
        if self.couplings.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::parameter("g", "couplings must be finite and >= 0"));
        }
        if self.lengths.len() < 2 || self.lengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::parameter("lengths", "need at least two increasing window lengths"));
        }
        if self.realizations == 0 {
            return Err(Error::parameter("realizations", "must be >= 1"));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::parameter("epsilons", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RealizationReport {
    pub index: usize,
    pub seed: u64,
    pub curve: Vec<CurveRow>,
    /// `epsilon_averages[i][k]`: average of `E^{ε_i}` over window `k`.
    pub epsilon_averages: Vec<Vec<f64>>,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntermittencyReport {
    pub g: f64,
    pub realizations: Vec<RealizationReport>,
    pub subcritical_fraction: f64,
    pub supercritical_fraction: f64,
    pub inconclusive_fraction: f64,
    pub median_rho: f64,
    pub median_phi: f64,
}

impl IntermittencyReport {
    pub fn write_curve_csv(&self, path: impl AsRef<Path>, realization: usize) -> Result<()> {
        let r = &self.realizations[realization];
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "L,avg,f,rho,phi")?;
        for c in &r.curve {
            writeln!(out, "{},{},{},{},{}", c.l, c.avg, c.f, c.rho, c.phi)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs synthesize, solve and analyze for every realization and coupling.
/// Each realization's field is shared by all couplings.
pub fn intermittency_scan(density: &SpectralDensity, cfg: &ScanConfig) -> Result<Vec<IntermittencyReport>> {
    cfg.validate()?;
    let (lx, lt) = density.correlation_lengths();
    let l_max = *cfg.lengths.last().expect("validated");
    let mut n_x = ((l_max + cfg.margin * lx) / cfg.dx).ceil() as usize;
    // FFT-friendly size; the extra nodes only widen the margin.
    n_x = n_x.div_ceil(1024).max(1) * 1024;
    let length = n_x as f64 * cfg.dx;
    let field_rows = (cfg.duration / cfg.field_dt).ceil() as usize + 1;
    let grid = GridSpec {
        length,
        n_x,
        duration: (field_rows - 1) as f64 * cfg.field_dt,
        n_t: field_rows,
        time_padding: Some(cfg.margin * lt),
    };

    let per_realization: Vec<Vec<RealizationReport>> = (0..cfg.realizations)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(cfg.seed, Purpose::Lattice, i as u64);
            let (field, _) = synthesize_grid(density, &grid, seed)?;
            let max_s2 = field.as_lattice().expect("lattice").values.iter().map(|v| v * v).fold(0.0, f64::max);
            cfg.couplings
                .iter()
                .map(|&g| {
                    let solver = match cfg.solver_steps {
                        Some(n_t) => SolverGrid::new(length, n_x, cfg.duration, n_t, Scheme::StrangSplitting)?,
                        None => SolverGrid::with_default_steps(length, n_x, cfg.duration, g, max_s2, Scheme::StrangSplitting)?,
                    };
                    let sol = solve(&field, g, &solver, &SolveOptions::default())?;
                    let profile = Profile::new(solver.x0(), solver.dx(), sol.terminal_profile());
                    let (curve, epsilon_averages, decision) =
                        analyze_profile(&profile, &cfg.lengths, &cfg.phi, &cfg.epsilons, &cfg.thresholds);
                    Ok(RealizationReport { index: i, seed, curve, epsilon_averages, decision })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(cfg
        .couplings
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let realizations: Vec<RealizationReport> = per_realization.iter().map(|r| r[k].clone()).collect();
            let n = realizations.len() as f64;
            let frac = |reg: Regime| realizations.iter().filter(|r| r.decision.regime == reg).count() as f64 / n;
            let mut rhos: Vec<f64> = realizations.iter().map(|r| r.decision.rho_max).collect();
            let mut phis: Vec<f64> = realizations.iter().map(|r| r.decision.phi_max).collect();
            IntermittencyReport {
                g,
                subcritical_fraction: frac(Regime::SubcriticalLike),
                supercritical_fraction: frac(Regime::SupercriticalLike),
                inconclusive_fraction: frac(Regime::Inconclusive),
                median_rho: median(&mut rhos),
                median_phi: median(&mut phis),
                realizations,
            }
        })
        .collect())
}

/// Draws from the Pareto law with `x_min = 1` and tail exponent `α`.
pub fn pareto<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = 1.0 - rng.random::<f64>();
    v.powf(-1.0 / alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IidRow {
    pub n: usize,
    /// Mean over repetitions of the sample mean.
    pub mean: f64,
    pub mean_se: f64,
    /// Interquartile range of the sample mean across repetitions.
    pub fluctuation: f64,
    /// Top `⌈ln ln N⌉` order statistics used for the share.
    pub top_count: usize,
    pub median_top_share: f64,
    /// Fraction of repetitions where the top share exceeds 1/2.
    pub majority_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IidReport {
    pub alpha: f64,
    pub repetitions: usize,
    pub rows: Vec<IidRow>,
    /// Slope of `ln IQR` against `ln N`.
    pub fluctuation_exponent: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub exponent_ci: f64,
    /// `α/(α-1)` when finite.
    pub population_mean: Option<f64>,
    pub predicted_exponent: f64,
}

/// Sample means of Pareto variables for each `N`, their fluctuation
/// scaling and the share carried by the largest few values.
pub fn iid_regime_demo(alpha: f64, ns: &[usize], repetitions: usize, seed: u64) -> Result<IidReport> {
    ensure_positive("alpha", alpha)?;
    if ns.is_empty() || ns.iter().any(|&n| n < 3) {
        return Err(Error::parameter("n", "need sample sizes >= 3"));
    }
    if repetitions < 4 {
        return Err(Error::parameter("repetitions", "must be >= 4"));
    }
    let rows: Vec<IidRow> = ns
        .iter()
        .enumerate()
        .map(|(ni, &n)| {
            let top = (n as f64).ln().ln().ceil().max(1.0) as usize;
            let stats: Vec<(f64, f64)> = (0..repetitions)
                .into_par_iter()
                .map_init(Vec::new, |buf: &mut Vec<f64>, rep| {
                    let mut rng = rng::stream(seed, Purpose::Pareto, ((ni as u64) << 32) | rep as u64);
                    buf.clear();
                    buf.extend((0..n).map(|_| pareto(alpha, &mut rng)));
                    let sum: f64 = buf.iter().sum();
                    let k = n - top;
                    buf.select_nth_unstable_by(k, f64::total_cmp);
                    let top_sum: f64 = buf[k..].iter().sum();
                    (sum / n as f64, top_sum / sum)
                })
                .collect();
            let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let r = repetitions as f64;
            let mean = means.iter().sum::<f64>() / r;
            let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (r - 1.0);
            let mut sorted = means.clone();
            sorted.sort_by(f64::total_cmp);
            let q = |p: f64| {
                let pos = p * (sorted.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
            };
            let mut shares: Vec<f64> = stats.iter().map(|s| s.1).collect();
            let majority = shares.iter().filter(|&&s| s > 0.5).count() as f64 / r;
            IidRow {
                n,
                mean,
                mean_se: (var / r).sqrt(),
                fluctuation: q(0.75) - q(0.25),
                top_count: top,
                median_top_share: median(&mut shares),
                majority_fraction: majority,
            }
        })
        .collect();

    let (slope, ci) = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.fluctuation.ln()).collect();
        fit_line(&xs, &ys)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(IidReport {
        alpha,
        repetitions,
        rows,
        fluctuation_exponent: slope,
        exponent_ci: ci,
        population_mean: if alpha > 1.0 { Some(alpha / (alpha - 1.0)) } else { None },
        predicted_exponent: if alpha >= 2.0 { -0.5 } else { 1.0 / alpha - 1.0 },
    })
}

/// Least-squares slope and the half-width of its 95% interval.
fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if xs.len() < 3 {
        return (slope, f64::NAN);
    }
    let resid: f64 = xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let se = (resid / (n - 2.0) / sxx).sqrt();
    (slope, 1.96 * se)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(c: f64) -> Profile {
        Profile::new(-32.0, 0.125, vec![c; 513])
    }

    #[test]
    fn averages_of_constant_profiles() {
        let p = flat(3.0);
        for l in [8.0, 16.0, 64.0] {
            assert_eq!(spatial_average(&p, l), 3.0);
            let e = epsilon_moment_average(&p, l, 0.5);
            assert!((e - 3f64.sqrt()).abs() < 1e-13, "{l} {e}");
        }
    }

    #[test]
    fn f_of_l_uses_running_infimum() {
        let f = f_of_l(&[4.0, 2.0, 9.0], &Phi::sqrt());
        assert_eq!(f, vec![2f64.sqrt(), 2f64.sqrt(), 3.0]);
        let doubled = f_of_l(&[8.0, 4.0, 18.0], &Phi::sqrt());
        for (a, b) in f.iter().zip(&doubled) {
            assert!((b / a - 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn truncation_extremes() {
        let mut v = vec![1.0; 513];
        v[256] = 1000.0;
        let p = Profile::new(-32.0, 0.125, v);
        assert_eq!(truncated_stats(&p, 64.0, 0.5), (1.0, 1.0));
        assert_eq!(truncated_stats(&p, 64.0, 2000.0), (0.0, 0.0));
        let (rho, occ) = truncated_stats(&p, 64.0, 2.0);
        assert!((rho - 125.0 / 188.875).abs() < 1e-12);
        assert!((occ - 0.125 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn max_to_sum_basics() {
        assert_eq!(max_to_sum(&[3.0], 1.0).unwrap(), 1.0);
        assert!((max_to_sum(&[2.0; 8], 1.0).unwrap() - 0.125).abs() < 1e-15);
        assert!(max_to_sum(&[], 1.0).is_err());
    }

    #[test]
    fn zero_coupling_profile_is_subcritical() {
        let lengths = ScanConfig::geometric_lengths(8.0, 64.0);
        let (curve, _, d) = analyze_profile(&flat(1.0), &lengths, &Phi::sqrt(), &[0.5], &Thresholds::default());
        assert!(curve.iter().all(|c| c.avg == 1.0 && c.rho == 0.0));
        assert_eq!(d.regime, Regime::SubcriticalLike);
    }

    #[test]
    fn phi_must_be_sublinear() {
        assert!(Phi::Power { exponent: 1.0 }.validate().is_err());
        assert!(Phi::Power { exponent: 0.75 }.validate().is_ok());
    }

    #[test]
    fn slope_fit_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 0.5, 0.0, -0.5];
        let (s, ci) = fit_line(&xs, &ys);
        assert!((s + 0.5).abs() < 1e-15 && ci < 1e-12);
    }
}
