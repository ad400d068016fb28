//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints exactly one PASS or FAIL line; exits non-zero if any fails.

use std::f64::consts::PI;
use std::time::Instant;

use amplab_core::diagnostics::{iid_regime_demo, intermittency_scan, ScanConfig};
use amplab_core::extremes::{
    epsilon_moment_bound, mc_field_max_tail, mc_sup_norms, p_r_poisson, p_r_theta, poisson_pair_check, survival_cdf,
    tail_constant, EpsilonBound, ExtremesMcConfig,
};
use amplab_core::feynman_kac::{fk_estimate, fk_estimate_with_discretization, FkConfig};
use amplab_core::field_synthesis::{sample_modes, synthesize_grid, GridSpec};
use amplab_core::heat_solver::{solve, Scheme, SolveOptions, SolverGrid};
use amplab_core::path_spectrum::{
    amplification_bound, eigen_spectrum, kernel_matrix, maximize_mu1, mc_validate_amplification, path_amplification,
    top_eigenvalue, Amplification, ExponentialKernel, McAmplificationConfig, OptimizerConfig, PiecewiseLinearPath,
};
use amplab_core::rng::{stream, Purpose};
use amplab_core::spectral_model::{CorrelationEvaluator, SpectralDensity};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn isotropic() -> SpectralDensity {
    SpectralDensity::gaussian_isotropic(1.0).unwrap()
}

struct Shared {
    g_c: f64,
    mu_static: f64,
    best_mu: f64,
    best_path: PiecewiseLinearPath,
}

fn optimizer_run() -> Shared {
    let ev = CorrelationEvaluator::new(isotropic());
    let cfg = OptimizerConfig { seed: 11, ..OptimizerConfig::default() };
    let best = maximize_mu1(&ev, 1.0, &cfg).unwrap();
    let mu_static = top_eigenvalue(&kernel_matrix(&ev, &PiecewiseLinearPath::static_path(1.0), cfg.n_q_final).unwrap());
    Shared { g_c: 0.5 / best.mu_max, mu_static, best_mu: best.mu_max, best_path: best.path }
}

fn zero_coupling() -> Outcome {
    let d = isotropic();
    let modes = sample_modes(&d, 128, 3).unwrap();
    let (lattice, _) = synthesize_grid(&d, &GridSpec::resolving(&d, 32.0, 1.0), 4).unwrap();
    let mut worst: f64 = 0.0;
    for field in [&modes, &lattice] {
        for scheme in [Scheme::StrangSplitting, Scheme::CrankNicolsonImex] {
            let grid = SolverGrid::new(32.0, 256, 1.0, 200, scheme).unwrap();
            let sol = solve(field, 0.0, &grid, &SolveOptions::default()).unwrap();
            worst = sol.terminal_profile().iter().fold(worst, |w, e| w.max((e - 1.0).abs()));
        }
        let fk = fk_estimate(field, 0.0, 0.5, &FkConfig { duration: 1.0, n_paths: 500, n_steps: 64, seed: 5 }).unwrap();
        worst = worst.max((fk.mean - 1.0).abs()).max(fk.se);
    }
    check(worst <= 1e-12, format!("max |E - 1| = {worst:.1e}"))
}

fn fk_pde_duality(shared: &Shared) -> Outcome {
    let d = isotropic();
    let g = 0.25 * shared.g_c;
    let mut lines = vec![];
    let mut ok = true;
    for i in 0..5u64 {
        let field = sample_modes(&d, 256, 100 + i).unwrap();
        let solve_at = |n_t| {
            let grid = SolverGrid::new(32.0, 512, 1.0, n_t, Scheme::StrangSplitting).unwrap();
            let sol = solve(&field, g, &grid, &SolveOptions::default()).unwrap();
            sol.terminal_profile()[256]
        };
        let (pde, pde_coarse) = (solve_at(1024), solve_at(512));
        let cfg = FkConfig { duration: 1.0, n_paths: 20_000, n_steps: 256, seed: 200 + i };
        let fk = fk_estimate_with_discretization(&field, g, 0.0, &cfg).unwrap();
        let budget = 3.0 * (fk.estimate.se + fk.discretization + (pde - pde_coarse).abs());
        let gap = (fk.estimate.mean - pde).abs();
        ok &= gap <= budget;
        lines.push(format!("{gap:.2e}/{budget:.2e}"));
    }
    check(ok, format!("g = {g:.4}, |fk - pde| / allowed: {}", lines.join(" ")))
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn eigen_oracle() -> Outcome {
    let mut oracle = vec![];
    for n in 0..4 {
        let base = 2.0 * PI * n as f64;
        // Even modes: w tan(w/2) = 1 on (2nπ, (2n+1)π).
        oracle.push(bisect(|w| w * (w / 2.0).tan() - 1.0, base + 1e-12, base + PI - 1e-9));
        // Odd modes: w cot(w/2) = -1 on ((2n+1)π, (2n+2)π).
        oracle.push(bisect(|w| w / (w / 2.0).tan() + 1.0, base + PI + 1e-9, base + 2.0 * PI - 1e-9));
    }
    let mut lambdas: Vec<f64> = oracle.iter().map(|w| 2.0 / (1.0 + w * w)).collect();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let kernel = ExponentialKernel { rate_x: 0.0, rate_t: 1.0 };
    let spec = eigen_spectrum(&kernel_matrix(&kernel, &PiecewiseLinearPath::static_path(1.0), 200).unwrap()).unwrap();
    let worst = (0..5).map(|i| (spec.eigenvalues[i] - lambdas[i]).abs()).fold(0.0, f64::max);
    check(worst <= 1e-4, format!("top 5 max deviation {worst:.2e} (mu1 = {:.10})", spec.eigenvalues[0]))
}

fn trace_identity() -> Outcome {
    let ev = CorrelationEvaluator::new(isotropic());
    let mut rng = stream(21, Purpose::Probe, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let t = rng.random_range(0.5..4.0);
        let path = PiecewiseLinearPath::random_pinned(t, 8, 1.5, &mut rng);
        let spec = eigen_spectrum(&kernel_matrix(&ev, &path, 120).unwrap()).unwrap();
        worst = worst.max((spec.trace() - t).abs() / t);
    }
    check(worst <= 1e-6, format!("max |sum mu - T| / T = {worst:.2e}"))
}

fn critical_coupling_bound(shared: &Shared) -> Outcome {
    let ev = CorrelationEvaluator::new(isotropic());
    let mut rng = stream(22, Purpose::Probe, 1);
    let mut beaten = 0;
    for _ in 0..20 {
        let bump = PiecewiseLinearPath::random_pinned(1.0, 16, 0.3, &mut rng);
        let mu = top_eigenvalue(&kernel_matrix(&ev, &bump, 200).unwrap());
        if mu > shared.mu_static + 1e-8 {
            beaten += 1;
        }
    }
    let gap = (shared.best_mu - shared.mu_static).abs();
    let ok = shared.g_c >= 0.5 && gap <= 1e-8 && beaten == 0;
    check(
        ok,
        format!(
            "g_c = {:.6} >= 0.5, |mu_best - mu_static| = {gap:.1e}, best path sup {:.1e}, perturbations above static: {beaten}/20",
            shared.g_c,
            shared.best_path.sup_norm()
        ),
    )
}

fn amplification_vs_mc() -> Outcome {
    let d = isotropic();
    let path = PiecewiseLinearPath::static_path(1.0);
    let cfg = McAmplificationConfig { seed: 31, ..McAmplificationConfig::default() };
    let mc = mc_validate_amplification(&d, &path, &[0.1], &cfg).unwrap();
    let ev = CorrelationEvaluator::new(d);
    let spec = eigen_spectrum(&kernel_matrix(&ev, &path, 200).unwrap()).unwrap();
    let g_max = 0.5 / spec.mu1();
    let mut bound_ok = true;
    for k in 1..=20 {
        let g = g_max * k as f64 / 21.0;
        if let Amplification::Finite { value, .. } = path_amplification(&spec, g).unwrap() {
            bound_ok &= value <= amplification_bound(&spec, g) * (1.0 + 1e-12);
        } else {
            bound_ok = false;
        }
    }
    let c = mc[0];
    check(
        c.z_score.abs() <= 3.0 && bound_ok,
        format!("MC {:.5} +- {:.5} vs product {:.5} (z = {:.2}); bound holds at 20 probes: {bound_ok}", c.mc_mean, c.mc_se, c.product, c.z_score),
    )
}

fn poisson_identity() -> Outcome {
    let mut series = 0.0f64;
    for i in 0..30 {
        let r = 0.2 + 4.8 * i as f64 / 29.0;
        series = series.max((p_r_theta(r, 1.0) - p_r_poisson(r, 1.0)).abs());
    }
    let pair = [0.1, 0.5, 1.0, 5.0].iter().map(|&a| poisson_pair_check(a).unwrap().discrepancy).fold(0.0, f64::max);
    let cdf = survival_cdf(1.0, 1.0);
    // Kolmogorov-Smirnov of simulated sup-norms against the series CDF.
    let mut sups = mc_sup_norms(1.0, 2000, 10_000, 41);
    sups.sort_by(f64::total_cmp);
    let n = sups.len() as f64;
    let ks = sups
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let f = survival_cdf(r, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let ks_crit = 1.63 / n.sqrt();
    let ok = series <= 1e-12 && pair <= 1e-12 && (cdf - 0.3708).abs() <= 1e-4 && ks <= ks_crit;
    check(
        ok,
        format!("series gap {series:.1e}, pair gap {pair:.1e}, P(R <= 1) = {cdf:.6}, KS {ks:.4} (1% critical {ks_crit:.4})"),
    )
}

fn tail_law() -> Outcome {
    let d = isotropic();
    let cfg = ExtremesMcConfig { n_realizations: 40_000, seed: 51, ..ExtremesMcConfig::default() };
    let rows = mc_field_max_tail(&d, &cfg).unwrap();
    let worst = rows.iter().map(|r| r.log_ratio.abs()).fold(0.0, f64::max);
    let lambda = d.lambda_matrix();
    let a1 = tail_constant(1.0, &lambda).unwrap().a;
    let a2 = tail_constant(2.0, &lambda).unwrap().a;
    let closed = lambda.det.sqrt() / (2.0 * PI);
    let scaling = (a2 / a1 / (2.0 * 2f64.sqrt()) - 1.0).abs();
    let ok = worst <= 0.5 && a1 > 0.0 && scaling <= 1e-6 && (a1 / closed - 1.0).abs() <= 1e-6;
    let ratios: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.log_ratio)).collect();
    check(
        ok,
        format!(
            "r = {}, T = {}, {} realizations, log-ratios [{}]; A(1) = {a1:.8}, A(2)/A(1)/2sqrt2 - 1 = {scaling:.1e}",
            cfg.r,
            cfg.duration,
            cfg.n_realizations,
            ratios.join(", ")
        ),
    )
}

fn finite_time_transition(shared: &Shared) -> Outcome {
    let d = isotropic();
    let gs: Vec<f64> = [0.25, 0.5, 2.0, 4.0].iter().map(|m| m * shared.g_c).collect();
    let cfg = ScanConfig::with_defaults(&d, 1.0, gs, 61);
    let reps = intermittency_scan(&d, &cfg).unwrap();
    let low = reps[..2].iter().all(|r| r.subcritical_fraction >= 0.8);
    let high = reps[2..]
        .iter()
        .all(|r| r.supercritical_fraction >= 0.8 && r.median_rho > 0.5 && r.median_phi < 0.1);
    let summary: Vec<String> = reps
        .iter()
        .map(|r| {
            format!(
                "g/g_c {:.2}: sub {:.2} super {:.2} rho {:.2} phi {:.3}",
                r.g / shared.g_c,
                r.subcritical_fraction,
                r.supercritical_fraction,
                r.median_rho,
                r.median_phi
            )
        })
        .collect();
    check(low && high, summary.join("; "))
}

fn iid_regimes() -> Outcome {
    let ns = [100, 1_000, 10_000, 100_000, 1_000_000];
    let a25 = iid_regime_demo(2.5, &ns, 100, 71).unwrap();
    let a15 = iid_regime_demo(1.5, &ns, 100, 72).unwrap();
    let a05 = iid_regime_demo(0.5, &[1_000_000], 100, 73).unwrap();
    let last = a25.rows.last().unwrap();
    let mean_ok = (last.mean - 5.0 / 3.0).abs() <= 3.0 * last.mean_se;
    let e25 = (a25.fluctuation_exponent + 0.5).abs() <= 0.05;
    let e15 = (a15.fluctuation_exponent + 1.0 / 3.0).abs() <= 0.05;
    let top = a05.rows[0].majority_fraction > 0.5;
    check(
        mean_ok && e25 && e15 && top,
        format!(
            "alpha 2.5: mean {:.5} +- {:.5}, exponent {:.3}; alpha 1.5: exponent {:.3}; alpha 0.5: top-{} share > 1/2 in {:.0}% of runs",
            last.mean,
            last.mean_se,
            a25.fluctuation_exponent,
            a15.fluctuation_exponent,
            a05.rows[0].top_count,
            100.0 * a05.rows[0].majority_fraction
        ),
    )
}

fn epsilon_window() -> Outcome {
    let d = isotropic();
    let mut rng = stream(81, Purpose::Probe, 2);
    let mut ok = true;
    for _ in 0..10 {
        let g = rng.random_range(0.05..3.0);
        let t = rng.random_range(0.25..8.0);
        let law = tail_constant(t, &d.lambda_matrix()).unwrap();
        let finite = epsilon_moment_bound(g, t, &law, 1.0 / (4.0 * g * t)).unwrap();
        let divergent = epsilon_moment_bound(g, t, &law, 1.0 / (2.0 * g * t)).unwrap();
        ok &= matches!(finite, EpsilonBound::Finite { value } if value.is_finite()) && divergent == EpsilonBound::Divergent;
    }
    check(ok, "finite at 1/(4gT), divergent at 1/(2gT) for 10 random (g, T)".into())
}

fn main() {
    let start = Instant::now();
    let shared = optimizer_run();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "zero coupling", Box::new(zero_coupling)),
        (2, "path integral vs PDE", Box::new(|| fk_pde_duality(&shared))),
        (3, "exponential kernel eigenvalues", Box::new(eigen_oracle)),
        (4, "trace identity", Box::new(trace_identity)),
        (5, "critical coupling bound", Box::new(|| critical_coupling_bound(&shared))),
        (6, "amplification product", Box::new(amplification_vs_mc)),
        (7, "Poisson summation", Box::new(poisson_identity)),
        (8, "field maximum tail", Box::new(tail_law)),
        (9, "finite-time transition", Box::new(|| finite_time_transition(&shared))),
        (10, "i.i.d. regimes", Box::new(iid_regimes)),
        (11, "epsilon-moment window", Box::new(epsilon_window)),
    ];
    let mut failed = 0;
    for (id, name, run) in &criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}, {secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}, {secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} of {} passed in {:.0}s", criteria.len() - failed, criteria.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
