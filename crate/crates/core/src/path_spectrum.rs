//! Spectrum of the covariance operator along a path,
//! `(T f)(t) = ∫₀ᵀ C(x(t) - x(t'), t - t') f(t') dt'`,
//! the amplification product built from it, and the search for the path
//! with the largest top eigenvalue.

use std::io::Write;
use std::path::Path;

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::field_synthesis::{sample_modes, SpaceTimeField};
use crate::quadrature::Rule;
use crate::rng::{self, Purpose};
use crate::spectral_model::{CorrelationEvaluator, Covariance, SpectralDensity};

/// `C ≡ 1`.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitKernel;

impl Covariance for UnitKernel {
    fn covariance(&self, _x: f64, _t: f64) -> f64 {
        1.0
    }
}

/// `C(x, t) = exp(-a|x| - b|t|)`.
#[derive(Clone, Copy, Debug)]
pub struct ExponentialKernel {
    pub rate_x: f64,
    pub rate_t: f64,
}

impl Covariance for ExponentialKernel {
    fn covariance(&self, x: f64, t: f64) -> f64 {
        (-self.rate_x * x.abs() - self.rate_t * t.abs()).exp()
    }
}

/// Continuous piecewise-linear path through `(times[i], values[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseLinearPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::parameter("path", "needs at least two breakpoints and one value per breakpoint"));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::parameter("path", "breakpoints must start at 0 and increase"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parameter("path", "values must be finite"));
        }
        Ok(PiecewiseLinearPath { times, values })
    }

    /// `x ≡ 0` on `[0, T]` with no interior breakpoints.
    pub fn static_path(duration: f64) -> Self {
        PiecewiseLinearPath { times: vec![0.0, duration], values: vec![0.0, 0.0] }
    }

    /// Path on the uniform nodes `t_k = k T / (n_p + 1)` with `x(T) = 0`;
    /// `free` holds the `n_p + 1` values at `t_0 .. t_{n_p}`.
    pub fn pinned(duration: f64, free: &[f64]) -> Self {
        let n = free.len();
        let times = (0..=n).map(|k| duration * k as f64 / n as f64).collect();
        let mut values = free.to_vec();
        values.push(0.0);
        PiecewiseLinearPath { times, values }
    }

    /// Random pinned path with Brownian-like node values of scale `amplitude`.
    pub fn random_pinned<R: Rng + ?Sized>(duration: f64, n_p: usize, amplitude: f64, rng: &mut R) -> Self {
        let n = n_p + 1;
        let h = duration / n as f64;
        let mut free = vec![0.0; n];
        let mut b = 0.0;
        for v in free.iter_mut().rev() {
            let z: f64 = rng.sample(StandardNormal);
            b += amplitude * h.sqrt() * z;
            *v = b;
        }
        PiecewiseLinearPath::pinned(duration, &free)
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    pub fn value(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let (x0, x1) = (self.values[i - 1], self.values[i]);
        x0 + (x1 - x0) * ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)
    }

    pub fn translate(&self, a: f64) -> Self {
        PiecewiseLinearPath { times: self.times.clone(), values: self.values.iter().map(|v| v + a).collect() }
    }

    /// Pointwise sum of two paths sharing breakpoints.
    pub fn plus(&self, other: &PiecewiseLinearPath, scale: f64) -> Result<Self> {
        if self.times != other.times {
            return Err(Error::parameter("path", "paths must share breakpoints"));
        }
        Ok(PiecewiseLinearPath {
            times: self.times.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + scale * b).collect(),
        })
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn id(&self) -> String {
        format!("piecewise-linear({} nodes, sup {:.3e})", self.times.len(), self.sup_norm())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,x")?;
        for (t, x) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t},{x}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Nyström discretization on Gauss–Legendre panels between the path's
/// breakpoints.
#[derive(Clone, Debug)]
pub struct DiscretizedOperator {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub positions: Vec<f64>,
    /// `K_ij = C(x(t_i) - x(t_j), t_i - t_j)`.
    pub kernel: DMatrix<f64>,
    /// `√w_i K_ij √w_j`.
    pub weighted: DMatrix<f64>,
    pub duration: f64,
    pub path_id: String,
}

fn quadrature_for(path: &PiecewiseLinearPath, n_q: usize) -> Rule {
    Rule::composite(&path.times, n_q.max(path.times.len() - 1))
}

pub fn kernel_matrix<C: Covariance + ?Sized>(c: &C, path: &PiecewiseLinearPath, n_q: usize) -> Result<DiscretizedOperator> {
    if n_q < 8 {
        return Err(Error::parameter("n_q", format!("must be >= 8, got {n_q}")));
    }
    let rule = quadrature_for(path, n_q);
    let n = rule.len();
    let positions: Vec<f64> = rule.nodes.iter().map(|&t| path.value(t)).collect();
    let mut kernel = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = if i == j {
                c.covariance(0.0, 0.0)
            } else {
                c.covariance(positions[i] - positions[j], rule.nodes[i] - rule.nodes[j])
            };
            kernel[(i, j)] = v;
            kernel[(j, i)] = v;
        }
    }
    let sw: Vec<f64> = rule.weights.iter().map(|w| w.sqrt()).collect();
    let weighted = DMatrix::from_fn(n, n, |i, j| sw[i] * kernel[(i, j)] * sw[j]);
    Ok(DiscretizedOperator {
        nodes: rule.nodes,
        weights: rule.weights,
        positions,
        kernel,
        weighted,
        duration: path.duration(),
        path_id: path.id(),
    })
}

/// Eigenvalues of the operator, largest first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovSpectrum {
    pub eigenvalues: Vec<f64>,
    pub n_q: usize,
    pub duration: f64,
    pub path_id: String,
}

impl CovSpectrum {
    pub fn mu1(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "n,mu")?;
        for (i, mu) in self.eigenvalues.iter().enumerate() {
            writeln!(out, "{},{mu}", i + 1)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn eigen_spectrum(op: &DiscretizedOperator) -> Result<CovSpectrum> {
    let n = op.weighted.nrows();
    let mut ev: Vec<f64> = SymmetricEigen::new(op.weighted.clone()).eigenvalues.iter().copied().collect();
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("symmetric eigensolver returned non-finite eigenvalues".into()));
    }
    ev.sort_by(|a, b| b.total_cmp(a));
    let floor = -1e-10 * op.duration;
    if let Some(&bad) = ev.iter().find(|&&v| v < floor) {
        return Err(Error::Numerical(format!(
            "kernel is not positive semidefinite: eigenvalue {bad:e} below {floor:e}"
        )));
    }
    ev.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(CovSpectrum { eigenvalues: ev, n_q: n, duration: op.duration, path_id: op.path_id.clone() })
}

/// Largest eigenvalue only.
pub fn top_eigenvalue(op: &DiscretizedOperator) -> f64 {
    op.weighted.clone().symmetric_eigenvalues().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// `∏ (1 - 2 g μ_n)^{-1/2}` or divergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Amplification {
    Finite {
        value: f64,
        log_value: f64,
        /// Bound on the log of the factor contributed by eigenvalues the
        /// discretization does not resolve, from the trace remainder.
        log_truncation_bound: f64,
    },
    Divergent,
}

impl Amplification {
    pub fn value(&self) -> f64 {
        match self {
            Amplification::Finite { value, .. } => *value,
            Amplification::Divergent => f64::INFINITY,
        }
    }
}

pub fn path_amplification(spec: &CovSpectrum, g: f64) -> Result<Amplification> {
    if !(g.is_finite() && g >= 0.0) {
        return Err(Error::parameter("g", format!("must be finite and >= 0, got {g}")));
    }
    if 2.0 * g * spec.mu1() >= 1.0 {
        return Ok(Amplification::Divergent);
    }
    let log_value: f64 = spec.eigenvalues.iter().map(|mu| -0.5 * (-2.0 * g * mu).ln_1p()).sum();
    let remainder = (spec.duration - spec.trace()).max(0.0);
    let smallest = *spec.eigenvalues.last().expect("nonempty");
    let log_truncation_bound = g * remainder / (1.0 - 2.0 * g * smallest);
    Ok(Amplification::Finite { value: log_value.exp(), log_value, log_truncation_bound })
}

/// `exp(g T / (1 - 2 g μ₁))`, the a priori bound on the product.
pub fn amplification_bound(spec: &CovSpectrum, g: f64) -> f64 {
    if 2.0 * g * spec.mu1() >= 1.0 {
        f64::INFINITY
    } else {
        (g * spec.duration / (1.0 - 2.0 * g * spec.mu1())).exp()
    }
}

/// Monte Carlo check of the amplification product over field realizations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AmplificationCheck {
    pub g: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub product: f64,
    pub mu1: f64,
    pub z_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McAmplificationConfig {
    pub n_realizations: usize,
    pub modes: usize,
    /// Gauss–Legendre nodes per path segment for the action integral.
    pub action_nodes: usize,
    /// Nodes for the product-formula spectrum.
    pub n_q: usize,
    pub seed: u64,
}

impl Default for McAmplificationConfig {
    fn default() -> Self {
        McAmplificationConfig { n_realizations: 10_000, modes: 4096, action_nodes: 32, n_q: 200, seed: 0 }
    }
}

/// Averages `exp(g ∫ S(x(t), t)² dt)` over mode-sum fields for each `g`
/// (common realizations) and compares with the product formula.
pub fn mc_validate_amplification(
    density: &SpectralDensity,
    path: &PiecewiseLinearPath,
    gs: &[f64],
    cfg: &McAmplificationConfig,
) -> Result<Vec<AmplificationCheck>> {
    if cfg.n_realizations < 2 {
        return Err(Error::parameter("n_realizations", "must be >= 2"));
    }
    let evaluator = CorrelationEvaluator::new(density.clone());
    let spec = eigen_spectrum(&kernel_matrix(&evaluator, path, cfg.n_q)?)?;
    for &g in gs {
        if !(g >= 0.0) || 2.0 * g * spec.mu1() > 0.5 {
            return Err(Error::parameter(
                "g",
                format!("need 0 <= g and 2 g mu1 <= 0.5 for a finite-variance check, got g = {g}, mu1 = {}", spec.mu1()),
            ));
        }
    }
    let segments = path.times.len() - 1;
    let rule = Rule::composite(&path.times, cfg.action_nodes.max(1) * segments);
    let points: Vec<(f64, f64)> = rule.nodes.iter().map(|&t| (path.value(t), t)).collect();
    let actions: Vec<f64> = (0..cfg.n_realizations)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(cfg.seed, Purpose::Modes, i as u64);
            let field = sample_modes(density, cfg.modes, seed).expect("modes >= 1 checked by caller");
            points.iter().zip(&rule.weights).map(|(&(x, t), w)| w * field.value(x, t).powi(2)).sum()
        })
        .collect::<Vec<f64>>();
    let n = actions.len() as f64;
    gs.iter()
        .map(|&g| {
            let v: Vec<f64> = actions.iter().map(|a| (g * a).exp()).collect();
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let product = path_amplification(&spec, g)?.value();
            Ok(AmplificationCheck {
                g,
                mc_mean: mean,
                mc_se: se,
                product,
                mu1: spec.mu1(),
                z_score: if se > 0.0 { (mean - product) / se } else { 0.0 },
            })
        })
        .collect()
}

/// One row of the continuity probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContinuityRow {
    pub amplitude: f64,
    pub sup_norm: f64,
    pub delta_mu1: f64,
}

/// `|μ₁[x + a δ] - μ₁[x]|` for a fixed random direction `δ` with sup norm 1.
pub fn mu1_continuity_probe<C: Covariance + ?Sized>(
    c: &C,
    path: &PiecewiseLinearPath,
    amplitudes: &[f64],
    n_q: usize,
    seed: u64,
) -> Result<Vec<ContinuityRow>> {
    for w in amplitudes.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::parameter("amplitudes", "must be strictly decreasing"));
        }
    }
    if amplitudes.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::parameter("amplitudes", "must be positive"));
    }
    let mut rng = rng::stream(seed, Purpose::Probe, 0);
    let n = path.times.len();
    let mut dir: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    dir[n - 1] = 0.0;
    let norm = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    dir.iter_mut().for_each(|v| *v /= norm);
    let direction = PiecewiseLinearPath { times: path.times.clone(), values: dir };
    let base = top_eigenvalue(&kernel_matrix(c, path, n_q)?);
    amplitudes
        .iter()
        .map(|&a| {
            let p = path.plus(&direction, a)?;
            let mu = top_eigenvalue(&kernel_matrix(c, &p, n_q)?);
            Ok(ContinuityRow { amplitude: a, sup_norm: a, delta_mu1: (mu - base).abs() })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Interior breakpoints of the path.
    pub n_p: usize,
    /// Random starts in addition to the static path.
    pub random_starts: usize,
    pub max_iters: u64,
    /// Nodes used while searching.
    pub n_q_search: usize,
    /// Nodes for the final evaluation of each start.
    pub n_q_final: usize,
    /// Scale of the random starting paths.
    pub start_scale: f64,
    /// Initial simplex edge.
    pub simplex_step: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            n_p: 16,
            random_starts: 8,
            max_iters: 3000,
            n_q_search: 64,
            n_q_final: 200,
            start_scale: 1.0,
            simplex_step: 0.25,
            seed: 0,
        }
    }
}

/// Outcome of one optimizer start.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StartTrace {
    pub start: usize,
    pub initial_mu1: f64,
    pub final_mu1: f64,
    pub iterations: u64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaxMu1 {
    /// Best `μ₁` found: a lower bound on the supremum.
    pub mu_max: f64,
    pub path: PiecewiseLinearPath,
    pub best_start: usize,
    /// Largest minus smallest final `μ₁` across starts.
    pub spread: f64,
    pub trace: Vec<StartTrace>,
    /// True when no start reached the convergence tolerance.
    pub stagnated: bool,
}

struct NegMu1<'a, C: ?Sized> {
    c: &'a C,
    duration: f64,
    n_q: usize,
}

impl<C: Covariance + ?Sized> CostFunction for NegMu1<'_, C> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let path = PiecewiseLinearPath::pinned(self.duration, p);
        let op = kernel_matrix(self.c, &path, self.n_q)?;
        Ok(-top_eigenvalue(&op))
    }
}

/// Multi-start Nelder–Mead search for the path maximizing `μ₁` among
/// pinned piecewise-linear paths. Start 0 is the static path.
pub fn maximize_mu1<C: Covariance + ?Sized>(c: &C, duration: f64, cfg: &OptimizerConfig) -> Result<MaxMu1> {
    ensure_positive("duration", duration)?;
    if cfg.n_p < 2 {
        return Err(Error::parameter("n_p", "need at least 2 interior nodes"));
    }
    let dim = cfg.n_p + 1;
    let starts: Vec<Vec<f64>> = (0..=cfg.random_starts)
        .map(|s| {
            if s == 0 {
                vec![0.0; dim]
            } else {
                let mut rng = rng::stream(cfg.seed, Purpose::Optimizer, s as u64);
                let p = PiecewiseLinearPath::random_pinned(duration, cfg.n_p, cfg.start_scale, &mut rng);
                p.values[..dim].to_vec()
            }
        })
        .collect();

    let results: Vec<Result<(StartTrace, Vec<f64>)>> = starts
        .par_iter()
        .enumerate()
        .map(|(s, x0)| {
            let problem = NegMu1 { c, duration, n_q: cfg.n_q_search };
            let initial = -problem.cost(x0).map_err(|e| Error::Numerical(e.to_string()))?;
            let mut simplex = vec![x0.clone()];
            for i in 0..dim {
                let mut v = x0.clone();
                v[i] += cfg.simplex_step;
                simplex.push(v);
            }
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(1e-12)
                .map_err(|e| Error::Numerical(e.to_string()))?;
            let res = Executor::new(problem, solver)
                .configure(|st| st.max_iters(cfg.max_iters))
                .run()
                .map_err(|e| Error::Numerical(format!("optimizer start {s}: {e}")))?;
            let state = res.state();
            let best = state.get_best_param().cloned().unwrap_or_else(|| x0.clone());
            let converged = matches!(
                state.get_termination_status(),
                TerminationStatus::Terminated(TerminationReason::SolverConverged)
            );
            let path = PiecewiseLinearPath::pinned(duration, &best);
            let final_mu1 = top_eigenvalue(&kernel_matrix(c, &path, cfg.n_q_final)?);
            Ok((
                StartTrace { start: s, initial_mu1: initial, final_mu1, iterations: state.get_iter(), converged },
                best,
            ))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    // Ties go to the lowest start index.
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.0.final_mu1 > results[best].0.final_mu1 {
            best = i;
        }
    }
    let finals: Vec<f64> = results.iter().map(|r| r.0.final_mu1).collect();
    let spread = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let stagnated = results.iter().all(|r| !r.0.converged);
    Ok(MaxMu1 {
        mu_max: results[best].0.final_mu1,
        path: PiecewiseLinearPath::pinned(duration, &results[best].1),
        best_start: best,
        spread,
        trace: results.into_iter().map(|r| r.0).collect(),
        stagnated,
    })
}

/// `g_c = 1/(2 μ_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CriticalCoupling {
    pub g_c: f64,
    /// The search only bounds `μ_max` from below, so `g_c` is bounded from above.
    pub upper_bound_estimate: bool,
}

pub fn critical_coupling(mu_max: f64) -> Result<CriticalCoupling> {
    if !(mu_max > 0.0) || !mu_max.is_finite() {
        return Err(Error::Domain(format!("mu_max must be positive and finite, got {mu_max}")));
    }
    Ok(CriticalCoupling { g_c: 1.0 / (2.0 * mu_max), upper_bound_estimate: true })
}

/// JSON record of a critical-coupling run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GcRecord {
    pub mu_max: f64,
    pub g_c: f64,
    pub n_q: usize,
    pub n_p: usize,
    pub starts: usize,
    pub spread: f64,
}
