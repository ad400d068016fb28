//! Spectral densities `D(k, ω)` of the driving field, the correlation
//! function they induce, and the second spectral moments.
//!
//! Two kinds of density are supported. The Gaussian families have closed
//! forms for everything. A tabulated density is the bilinear interpolant of a
//! nonnegative table on a symmetric rectangular lattice (zero outside it);
//! its Fourier transform and moments are computed exactly cell by cell, so
//! the only error is roundoff.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::quadrature::Rule;

/// Named family of spectral densities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralFamily {
    GaussianIsotropic,
    GaussianAnisotropic,
    TabulatedGrid,
}

impl SpectralFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SpectralFamily::GaussianIsotropic => "gaussian-isotropic",
            SpectralFamily::GaussianAnisotropic => "gaussian-anisotropic",
            SpectralFamily::TabulatedGrid => "tabulated-grid",
        }
    }
}

/// Raw density table on a rectangular `(k, ω)` lattice.
///
/// `values[i * omega.len() + j]` is the density at `(k[i], omega[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTable {
    pub k: Vec<f64>,
    pub omega: Vec<f64>,
    pub values: Vec<f64>,
}

/// Family-specific parameters for [`make_spectral_density`].
#[derive(Clone, Debug, Default)]
pub struct SpectralParams {
    /// Spatial spectral width σ_k (inverse length). For the isotropic family
    /// it is used for both axes when `sigma_omega` is absent.
    pub sigma_k: Option<f64>,
    /// Temporal spectral width σ_ω (inverse time).
    pub sigma_omega: Option<f64>,
    pub table: Option<DensityTable>,
}

#[derive(Clone, Debug)]
enum Shape {
    Gaussian { sigma_k: f64, sigma_omega: f64, isotropic: bool },
    Tabulated(Box<Lattice>),
}

#[derive(Clone, Debug)]
struct Lattice {
    k0: f64,
    dk: f64,
    nk: usize,
    w0: f64,
    dw: f64,
    nw: usize,
    /// Normalized values, `nk * nw`, k-major.
    values: Vec<f64>,
    /// Cumulative cell masses for sampling, `(nk-1) * (nw-1)` entries.
    cell_cdf: Vec<f64>,
    max_value: f64,
}

impl Lattice {
    fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.nw + j]
    }

    fn interpolate(&self, k: f64, w: f64) -> f64 {
        let u = (k - self.k0) / self.dk;
        let v = (w - self.w0) / self.dw;
        let umax = (self.nk - 1) as f64;
        let vmax = (self.nw - 1) as f64;
        if !(0.0..=umax).contains(&u) || !(0.0..=vmax).contains(&v) {
            return 0.0;
        }
        let i = (u.floor() as usize).min(self.nk - 2);
        let j = (v.floor() as usize).min(self.nw - 2);
        let fu = u - i as f64;
        let fv = v - j as f64;
        (1.0 - fu) * (1.0 - fv) * self.value(i, j)
            + fu * (1.0 - fv) * self.value(i + 1, j)
            + (1.0 - fu) * fv * self.value(i, j + 1)
            + fu * fv * self.value(i + 1, j + 1)
    }
}

/// Admissible spectral density, normalized so that `∫∫ D = 1`.
#[derive(Clone, Debug)]
pub struct SpectralDensity {
    shape: Shape,
    rescale: f64,
}

/// `∫_0^1 (1 - v) e^{iuv} dv`.
fn half_hat(u: f64) -> Complex64 {
    if u.abs() < 0.5 {
        let iu = Complex64::new(0.0, u);
        let mut term = Complex64::new(1.0, 0.0);
        let mut sum = Complex64::new(0.5, 0.0);
        for n in 1..30 {
            term *= iu / n as f64;
            let c = term / ((n + 1) * (n + 2)) as f64;
            sum += c;
            if c.norm() < 1e-18 {
                break;
            }
        }
        sum
    } else {
        let e = Complex64::new(0.0, u).exp();
        Complex64::new(0.0, 1.0 / u) - (e - 1.0) / (u * u)
    }
}

/// Fourier transform of the piecewise-linear basis function attached to
/// node `i` of a uniform lattice with `n` nodes.
fn hat_transform(node: f64, h: f64, i: usize, n: usize, x: f64) -> Complex64 {
    let mut s = Complex64::new(0.0, 0.0);
    if i > 0 {
        s += half_hat(-h * x);
    }
    if i + 1 < n {
        s += half_hat(h * x);
    }
    Complex64::new(0.0, node * x).exp() * h * s
}

/// `∫ k^p hat_i(k) dk`, exact for the degrees used here.
fn hat_moment(node: f64, h: f64, i: usize, n: usize, p: u32) -> f64 {
    let mut m = 0.0;
    if i > 0 {
        let r = Rule::gauss_legendre(node - h, node, 6);
        m += r.integrate(|k| k.powi(p as i32) * (1.0 - (node - k) / h));
    }
    if i + 1 < n {
        let r = Rule::gauss_legendre(node, node + h, 6);
        m += r.integrate(|k| k.powi(p as i32) * (1.0 - (k - node) / h));
    }
    m
}

fn double_factorial_odd(m: u32) -> f64 {
    // (2m - 1)!!
    (1..=m).map(|j| (2 * j - 1) as f64).product()
}

fn uniform_nodes(name: &str, nodes: &[f64]) -> Result<(f64, f64)> {
    if nodes.len() < 2 {
        return Err(Error::Validation(format!("{name} axis needs at least 2 nodes")));
    }
    let h = (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64;
    if !(h > 0.0) {
        return Err(Error::Validation(format!("{name} nodes must be increasing")));
    }
    for (i, &v) in nodes.iter().enumerate() {
        if (v - (nodes[0] + i as f64 * h)).abs() > 1e-9 * h.max(1.0) {
            return Err(Error::Validation(format!("{name} nodes are not uniformly spaced")));
        }
        if (v + nodes[nodes.len() - 1 - i]).abs() > 1e-9 * h.max(1.0) {
            return Err(Error::Validation(format!("{name} nodes are not symmetric about zero")));
        }
    }
    Ok((nodes[0], h))
}

impl SpectralDensity {
    /// `D(k, ω) = exp(-(k² + ω²)/(2σ²)) / (2πσ²)`.
    pub fn gaussian_isotropic(sigma: f64) -> Result<Self> {
        ensure_positive("sigma", sigma)?;
        Ok(SpectralDensity {
            shape: Shape::Gaussian { sigma_k: sigma, sigma_omega: sigma, isotropic: true },
            rescale: 1.0,
        })
    }

    /// Product of centered Gaussians with widths σ_k and σ_ω.
    pub fn gaussian_anisotropic(sigma_k: f64, sigma_omega: f64) -> Result<Self> {
        ensure_positive("sigma_k", sigma_k)?;
        ensure_positive("sigma_omega", sigma_omega)?;
        Ok(SpectralDensity {
            shape: Shape::Gaussian { sigma_k, sigma_omega, isotropic: false },
            rescale: 1.0,
        })
    }

    /// Builds a tabulated density, symmetrizing and normalizing it.
    pub fn tabulated(table: DensityTable) -> Result<Self> {
        let DensityTable { k, omega, values } = table;
        let (k0, dk) = uniform_nodes("k", &k)?;
        let (w0, dw) = uniform_nodes("omega", &omega)?;
        let (nk, nw) = (k.len(), omega.len());
        if values.len() != nk * nw {
            return Err(Error::Validation(format!(
                "table has {} values, expected {} x {}",
                values.len(),
                nk,
                nw
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!("density table has a negative or non-finite entry {v}")));
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::Validation("density table is identically zero".into()));
        }
        let mut sym = vec![0.0; values.len()];
        let mut worst = 0.0f64;
        for i in 0..nk {
            for j in 0..nw {
                let a = values[i * nw + j];
                let b = values[(nk - 1 - i) * nw + (nw - 1 - j)];
                worst = worst.max((a - b).abs());
                sym[i * nw + j] = 0.5 * (a + b);
            }
        }
        if worst > 1e-12 * max {
            return Err(Error::Validation(format!(
                "density table violates D(-k,-w) = D(k,w): max asymmetry {worst:e} (relative {:e})",
                worst / max
            )));
        }
        // Trapezoid weights integrate the bilinear interpolant exactly.
        let wk = |i: usize| if i == 0 || i == nk - 1 { 0.5 * dk } else { dk };
        let ww = |j: usize| if j == 0 || j == nw - 1 { 0.5 * dw } else { dw };
        let mut total = 0.0;
        for i in 0..nk {
            for j in 0..nw {
                total += wk(i) * ww(j) * sym[i * nw + j];
            }
        }
        let rescale = 1.0 / total;
        for v in &mut sym {
            *v *= rescale;
        }
        let mut cell_cdf = Vec::with_capacity((nk - 1) * (nw - 1));
        let mut acc = 0.0;
        for i in 0..nk - 1 {
            for j in 0..nw - 1 {
                let corners = sym[i * nw + j] + sym[(i + 1) * nw + j] + sym[i * nw + j + 1] + sym[(i + 1) * nw + j + 1];
                acc += 0.25 * corners * dk * dw;
                cell_cdf.push(acc);
            }
        }
        Ok(SpectralDensity {
            shape: Shape::Tabulated(Box::new(Lattice {
                k0,
                dk,
                nk,
                w0,
                dw,
                nw,
                max_value: max * rescale,
                values: sym,
                cell_cdf,
            })),
            rescale,
        })
    }

    /// Reads a tabulated density from CSV with header `k,omega,density`.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let table = read_density_csv(path)?;
        SpectralDensity::tabulated(table)
    }

    pub fn family(&self) -> SpectralFamily {
        match &self.shape {
            Shape::Gaussian { isotropic: true, .. } => SpectralFamily::GaussianIsotropic,
            Shape::Gaussian { isotropic: false, .. } => SpectralFamily::GaussianAnisotropic,
            Shape::Tabulated(_) => SpectralFamily::TabulatedGrid,
        }
    }

    /// Short identifier used as provenance in outputs.
    pub fn id(&self) -> String {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => {
                format!("{}(sigma_k={sigma_k},sigma_omega={sigma_omega})", self.family().as_str())
            }
            Shape::Tabulated(l) => format!("tabulated-grid({}x{})", l.nk, l.nw),
        }
    }

    /// Factor applied to the raw input to reach unit mass (1 for the
    /// closed-form families).
    pub fn rescale_factor(&self) -> f64 {
        self.rescale
    }

    pub fn density(&self, k: f64, omega: f64) -> f64 {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => {
                let a = k / sigma_k;
                let b = omega / sigma_omega;
                (-(a * a + b * b) / 2.0).exp() / (2.0 * PI * sigma_k * sigma_omega)
            }
            Shape::Tabulated(l) => l.interpolate(k, omega),
        }
    }

    /// Closed-form (Gaussian) or exact cell-wise (tabulated) correlation.
    pub fn correlation(&self, x: f64, t: f64) -> f64 {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => {
                let a = sigma_k * x;
                let b = sigma_omega * t;
                (-(a * a + b * b) / 2.0).exp()
            }
            Shape::Tabulated(l) => {
                let gk: Vec<Complex64> = (0..l.nk)
                    .map(|i| hat_transform(l.k0 + i as f64 * l.dk, l.dk, i, l.nk, x))
                    .collect();
                let gw: Vec<Complex64> = (0..l.nw)
                    .map(|j| hat_transform(l.w0 + j as f64 * l.dw, l.dw, j, l.nw, t))
                    .collect();
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, a) in gk.iter().enumerate() {
                    let row: Complex64 = gw
                        .iter()
                        .enumerate()
                        .map(|(j, b)| b * l.value(i, j))
                        .sum();
                    acc += a * row;
                }
                acc.re.clamp(-1.0, 1.0)
            }
        }
    }

    /// Integration box and per-axis panel layout for brute-force quadrature.
    fn support(&self) -> ((f64, f64), (f64, f64)) {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => {
                ((-12.0 * sigma_k, 12.0 * sigma_k), (-12.0 * sigma_omega, 12.0 * sigma_omega))
            }
            Shape::Tabulated(l) => (
                (l.k0, l.k0 + (l.nk - 1) as f64 * l.dk),
                (l.w0, l.w0 + (l.nw - 1) as f64 * l.dw),
            ),
        }
    }

    fn axis_rule(&self, lo: f64, hi: f64, cells: Option<usize>, phase: f64, refine: usize) -> Rule {
        // Panels short enough that each carries at most ~2 radians of phase,
        // aligned with lattice cells for tabulated input.
        let width = hi - lo;
        let by_phase = (width * phase.abs() / 2.0).ceil() as usize;
        let panels = match cells {
            Some(c) => c * (1 + by_phase / c.max(1)),
            None => 24 + by_phase,
        };
        Rule::uniform_panels(lo, hi, panels * refine, 10)
    }

    /// Tensor-product Gauss–Legendre evaluation of `∫∫ D(k,ω) e^{i(kx+ωt)}`
    /// at two refinement levels. Returns the finer value and the level
    /// difference as an error estimate.
    pub fn correlation_by_quadrature(&self, x: f64, t: f64) -> (f64, f64) {
        let ((k_lo, k_hi), (w_lo, w_hi)) = self.support();
        let (ck, cw) = match &self.shape {
            Shape::Tabulated(l) => (Some(l.nk - 1), Some(l.nw - 1)),
            _ => (None, None),
        };
        let eval = |refine: usize| {
            let rk = self.axis_rule(k_lo, k_hi, ck, x, refine);
            let rw = self.axis_rule(w_lo, w_hi, cw, t, refine);
            let (ckx, skx): (Vec<f64>, Vec<f64>) = rk.nodes.iter().map(|k| { let (s, c) = (k * x).sin_cos(); (c, s) }).unzip();
            let (cwt, swt): (Vec<f64>, Vec<f64>) = rw.nodes.iter().map(|w| { let (s, c) = (w * t).sin_cos(); (c, s) }).unzip();
            let mut sum = 0.0;
            for (i, (&k, &wk)) in rk.nodes.iter().zip(&rk.weights).enumerate() {
                let mut row = 0.0;
                for (j, (&w, &ww)) in rw.nodes.iter().zip(&rw.weights).enumerate() {
                    row += ww * self.density(k, w) * (ckx[i] * cwt[j] - skx[i] * swt[j]);
                }
                sum += wk * row;
            }
            sum
        };
        let coarse = eval(1);
        let fine = eval(2);
        (fine, (fine - coarse).abs())
    }

    /// `∫∫ k^p ω^q D(k, ω) dk dω` for small even orders, exactly.
    pub fn moment(&self, p: u32, q: u32) -> f64 {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => {
                let axis = |s: f64, n: u32| {
                    if n % 2 == 1 {
                        0.0
                    } else {
                        s.powi(n as i32) * double_factorial_odd(n / 2)
                    }
                };
                axis(*sigma_k, p) * axis(*sigma_omega, q)
            }
            Shape::Tabulated(l) => {
                let mk: Vec<f64> = (0..l.nk)
                    .map(|i| hat_moment(l.k0 + i as f64 * l.dk, l.dk, i, l.nk, p))
                    .collect();
                let mw: Vec<f64> = (0..l.nw)
                    .map(|j| hat_moment(l.w0 + j as f64 * l.dw, l.dw, j, l.nw, q))
                    .collect();
                let mut acc = 0.0;
                for (i, a) in mk.iter().enumerate() {
                    for (j, b) in mw.iter().enumerate() {
                        acc += a * b * l.value(i, j);
                    }
                }
                acc
            }
        }
    }

    /// Same moment by brute-force tensor quadrature of the density itself.
    pub fn moment_by_quadrature(&self, p: u32, q: u32) -> f64 {
        let ((k_lo, k_hi), (w_lo, w_hi)) = self.support();
        let (ck, cw) = match &self.shape {
            Shape::Tabulated(l) => (Some(l.nk - 1), Some(l.nw - 1)),
            _ => (None, None),
        };
        let rk = self.axis_rule(k_lo, k_hi, ck, 0.0, 1);
        let rw = self.axis_rule(w_lo, w_hi, cw, 0.0, 1);
        let mut sum = 0.0;
        for (&k, &wk) in rk.nodes.iter().zip(&rk.weights) {
            let mut row = 0.0;
            for (&w, &ww) in rw.nodes.iter().zip(&rw.weights) {
                row += ww * w.powi(q as i32) * self.density(k, w);
            }
            sum += wk * k.powi(p as i32) * row;
        }
        sum
    }

    pub fn normalization_residual(&self) -> f64 {
        (self.moment_by_quadrature(0, 0) - 1.0).abs()
    }

    pub fn lambda_matrix(&self) -> LambdaMatrix {
        LambdaMatrix::new(self.moment(2, 0), self.moment(0, 2), self.moment(1, 1))
    }

    /// Correlation lengths `(1/√Var ∂ₓS, 1/√Var ∂ₜS)`.
    pub fn correlation_lengths(&self) -> (f64, f64) {
        let l = self.lambda_matrix();
        (1.0 / l.var_x.sqrt(), 1.0 / l.var_t.sqrt())
    }

    /// Cutoffs `(k_eff, ω_eff)` outside of which each marginal carries at
    /// most `tail_mass` of the spectral mass.
    pub fn effective_cutoffs(&self, tail_mass: f64) -> (f64, f64) {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => {
                let z = two_sided_normal_quantile(tail_mass);
                (sigma_k * z, sigma_omega * z)
            }
            Shape::Tabulated(l) => {
                let extent = |origin: f64, h: f64, n: usize, active: &dyn Fn(usize) -> bool| {
                    (0..n)
                        .filter(|&i| active(i))
                        .map(|i| (origin + i as f64 * h).abs() + h)
                        .fold(0.0, f64::max)
                };
                let k_eff = extent(l.k0, l.dk, l.nk, &|i| (0..l.nw).any(|j| l.value(i, j) > 0.0));
                let w_eff = extent(l.w0, l.dw, l.nw, &|j| (0..l.nk).any(|i| l.value(i, j) > 0.0));
                (k_eff, w_eff)
            }
        }
    }

    /// Draws `(k, ω)` with `D` as probability density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (sigma_k * a, sigma_omega * b)
            }
            Shape::Tabulated(l) => {
                let total = *l.cell_cdf.last().expect("nonempty lattice");
                let u = rng.random::<f64>() * total;
                let cell = l.cell_cdf.partition_point(|&c| c <= u).min(l.cell_cdf.len() - 1);
                let (i, j) = (cell / (l.nw - 1), cell % (l.nw - 1));
                let corner_max = l
                    .value(i, j)
                    .max(l.value(i + 1, j))
                    .max(l.value(i, j + 1))
                    .max(l.value(i + 1, j + 1));
                loop {
                    let fu: f64 = rng.random();
                    let fv: f64 = rng.random();
                    let k = l.k0 + (i as f64 + fu) * l.dk;
                    let w = l.w0 + (j as f64 + fv) * l.dw;
                    if rng.random::<f64>() * corner_max <= l.interpolate(k, w) {
                        return (k, w);
                    }
                }
            }
        }
    }

    /// Largest density value (used for diagnostics only).
    pub fn peak_density(&self) -> f64 {
        match &self.shape {
            Shape::Gaussian { sigma_k, sigma_omega, .. } => 1.0 / (2.0 * PI * sigma_k * sigma_omega),
            Shape::Tabulated(l) => l.max_value,
        }
    }

    pub fn check_conditions(&self, m1: u32, m2: u32) -> ConditionReport {
        let moment_k = self.moment(2 * m1, 0);
        let moment_omega = self.moment(0, 2 * m2);
        let residual = match &self.shape {
            Shape::Gaussian { .. } => self.normalization_residual(),
            Shape::Tabulated(_) => (self.moment(0, 0) - 1.0).abs(),
        };
        ConditionReport {
            m1,
            m2,
            moment_k,
            moment_omega,
            moments_finite: moment_k.is_finite() && moment_omega.is_finite(),
            orders_sufficient: m1 > 2 && m2 > 2,
            absolutely_continuous: true,
            normalization_residual: residual,
        }
    }
}

/// `z` with `P(|Z| > z) = tail` for a standard normal `Z`.
fn two_sided_normal_quantile(tail: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if libm::erfc(mid / std::f64::consts::SQRT_2) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Builds a density from a family tag and its parameters.
pub fn make_spectral_density(family: SpectralFamily, params: &SpectralParams) -> Result<SpectralDensity> {
    match family {
        SpectralFamily::GaussianIsotropic => {
            let s = params
                .sigma_k
                .or(params.sigma_omega)
                .ok_or_else(|| Error::parameter("sigma_k", "required for gaussian-isotropic"))?;
            if let (Some(a), Some(b)) = (params.sigma_k, params.sigma_omega) {
                if a != b {
                    return Err(Error::parameter("sigma_omega", "isotropic family needs sigma_k == sigma_omega"));
                }
            }
            SpectralDensity::gaussian_isotropic(s)
        }
        SpectralFamily::GaussianAnisotropic => {
            let sk = params
                .sigma_k
                .ok_or_else(|| Error::parameter("sigma_k", "required for gaussian-anisotropic"))?;
            let sw = params
                .sigma_omega
                .ok_or_else(|| Error::parameter("sigma_omega", "required for gaussian-anisotropic"))?;
            SpectralDensity::gaussian_anisotropic(sk, sw)
        }
        SpectralFamily::TabulatedGrid => {
            let table = params
                .table
                .clone()
                .ok_or_else(|| Error::parameter("table", "required for tabulated-grid"))?;
            SpectralDensity::tabulated(table)
        }
    }
}

/// Parses a `k,omega,density` CSV into a rectangular table.
pub fn read_density_csv(path: impl AsRef<Path>) -> Result<DensityTable> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Validation(e.to_string()))?
        .iter()
        .map(str::trim)
        .collect::<Vec<_>>();
    if headers != ["k", "omega", "density"] {
        return Err(Error::Validation(format!(
            "{}: expected header `k,omega,density`, found `{}`",
            path.display(),
            headers.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Validation(e.to_string()))?;
        let parse = |idx: usize| -> Result<f64> {
            record
                .get(idx)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Validation(format!("{}: bad number on data row {}", path.display(), line + 1)))
        };
        rows.push((parse(0)?, parse(1)?, parse(2)?));
    }
    table_from_rows(&rows)
}

fn table_from_rows(rows: &[(f64, f64, f64)]) -> Result<DensityTable> {
    let mut k: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mut omega: Vec<f64> = rows.iter().map(|r| r.1).collect();
    k.sort_by(f64::total_cmp);
    k.dedup();
    omega.sort_by(f64::total_cmp);
    omega.dedup();
    if k.len() * omega.len() != rows.len() {
        return Err(Error::Validation(format!(
            "table is not a rectangular lattice: {} rows for {} k x {} omega nodes",
            rows.len(),
            k.len(),
            omega.len()
        )));
    }
    let mut values = vec![f64::NAN; rows.len()];
    for &(kv, wv, d) in rows {
        let i = k.partition_point(|&x| x < kv);
        let j = omega.partition_point(|&x| x < wv);
        let slot = &mut values[i * omega.len() + j];
        if !slot.is_nan() {
            return Err(Error::Validation(format!("duplicate lattice point ({kv}, {wv})")));
        }
        *slot = d;
    }
    Ok(DensityTable { k, omega, values })
}

/// Outcome of checking the admissibility conditions on `D`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub m1: u32,
    pub m2: u32,
    /// `∫∫ |k|^{2 m1} D`.
    pub moment_k: f64,
    /// `∫∫ |ω|^{2 m2} D`.
    pub moment_omega: f64,
    pub moments_finite: bool,
    /// Whether the requested orders exceed 2 as the smoothness condition needs.
    pub orders_sufficient: bool,
    /// Always true: the representation has no point masses.
    pub absolutely_continuous: bool,
    pub normalization_residual: f64,
}

impl ConditionReport {
    pub fn passes(&self) -> bool {
        self.moments_finite && self.orders_sufficient && self.absolutely_continuous && self.normalization_residual <= 1e-8
    }
}

/// Second spectral moments of the field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaMatrix {
    pub var_x: f64,
    pub var_t: f64,
    pub cov_xt: f64,
    pub det: f64,
}

impl LambdaMatrix {
    pub fn new(var_x: f64, var_t: f64, cov_xt: f64) -> Self {
        LambdaMatrix {
            var_x,
            var_t,
            cov_xt,
            det: (var_x * var_t - cov_xt * cov_xt).max(0.0),
        }
    }
}

/// Anything that can act as a stationary correlation function `C(x, t)`.
pub trait Covariance: Sync {
    fn covariance(&self, x: f64, t: f64) -> f64;
}

/// How a correlation value was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMethod {
    ClosedForm,
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorrelationValue {
    pub value: f64,
    pub error_estimate: f64,
    pub method: CorrelationMethod,
}

/// Evaluates `C(x, t)` for a density.
#[derive(Clone, Debug)]
pub struct CorrelationEvaluator {
    density: SpectralDensity,
    force_quadrature: bool,
}

impl CorrelationEvaluator {
    pub fn new(density: SpectralDensity) -> Self {
        CorrelationEvaluator { density, force_quadrature: false }
    }

    /// Evaluator that always goes through the Fourier quadrature.
    pub fn quadrature_only(density: SpectralDensity) -> Self {
        CorrelationEvaluator { density, force_quadrature: true }
    }

    pub fn density(&self) -> &SpectralDensity {
        &self.density
    }

    pub fn correlation(&self, x: f64, t: f64) -> f64 {
        if self.force_quadrature {
            self.density.correlation_by_quadrature(x, t).0.clamp(-1.0, 1.0)
        } else {
            self.density.correlation(x, t)
        }
    }

    /// Correlation with an error estimate; fails when the quadrature route
    /// cannot reach 1e-8.
    pub fn evaluate(&self, x: f64, t: f64) -> Result<CorrelationValue> {
        if !self.force_quadrature {
            return Ok(CorrelationValue {
                value: self.density.correlation(x, t),
                error_estimate: 0.0,
                method: CorrelationMethod::ClosedForm,
            });
        }
        let (value, err) = self.density.correlation_by_quadrature(x, t);
        if !(err <= 1e-8) {
            return Err(Error::Numerical(format!(
                "Fourier quadrature for C({x}, {t}) did not converge: value {value:e}, level difference {err:e}"
            )));
        }
        Ok(CorrelationValue {
            value: value.clamp(-1.0, 1.0),
            error_estimate: err,
            method: CorrelationMethod::Quadrature,
        })
    }
}

impl Covariance for CorrelationEvaluator {
    fn covariance(&self, x: f64, t: f64) -> f64 {
        self.correlation(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn box_table(n: usize) -> DensityTable {
        let nodes: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        DensityTable { k: nodes.clone(), omega: nodes, values: vec![1.0; n * n] }
    }

    #[test]
    fn isotropic_gaussian_matches_formula_and_symmetry() {
        let d = SpectralDensity::gaussian_isotropic(1.0).unwrap();
        let expected = (-(1.0 + 1.0) / 2.0f64).exp() / (2.0 * PI);
        assert!((d.density(1.0, -1.0) - expected).abs() < 1e-15);
        assert_eq!(d.density(1.0, -1.0), d.density(-1.0, 1.0));
        assert!(d.normalization_residual() <= 1e-10);
        assert_eq!(d.rescale_factor(), 1.0);
    }

    #[test]
    fn box_table_normalizes_to_quarter() {
        let d = SpectralDensity::tabulated(box_table(9)).unwrap();
        assert!((d.rescale_factor() - 0.25).abs() < 1e-14);
        assert!((d.density(0.3, -0.2) - 0.25).abs() < 1e-14);
        assert_eq!(d.density(1.5, 0.0), 0.0);
        assert!((d.correlation(0.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tabulated_box_correlation_is_product_of_sincs() {
        // Constant on [-1,1]^2, so C(x,t) = sinc(x) sinc(t) exactly.
        let d = SpectralDensity::tabulated(box_table(5)).unwrap();
        for &(x, t) in &[(0.3, 0.0), (1.7, -2.2), (4.0, 0.5)] {
            let sinc = |u: f64| if u == 0.0 { 1.0 } else { u.sin() / u };
            let want = sinc(x) * sinc(t);
            assert!((d.correlation(x, t) - want).abs() < 1e-12, "({x},{t})");
        }
    }

    #[test]
    fn negative_and_asymmetric_tables_are_rejected() {
        let mut t = box_table(5);
        t.values[3] = -0.1;
        assert!(matches!(SpectralDensity::tabulated(t), Err(Error::Validation(_))));
        let mut t = box_table(5);
        t.values[0] = 2.0;
        assert!(matches!(SpectralDensity::tabulated(t), Err(Error::Validation(_))));
        let mut t = box_table(5);
        t.values[0] += 1e-14;
        assert!(SpectralDensity::tabulated(t).is_ok());
    }

    #[test]
    fn nonpositive_scale_is_a_parameter_error() {
        assert!(matches!(SpectralDensity::gaussian_isotropic(0.0), Err(Error::Parameter { .. })));
        assert!(matches!(SpectralDensity::gaussian_anisotropic(1.0, -2.0), Err(Error::Parameter { .. })));
        let p = SpectralParams { sigma_k: Some(1.0), ..Default::default() };
        assert!(make_spectral_density(SpectralFamily::GaussianAnisotropic, &p).is_err());
    }

    #[test]
    fn lambda_matrix_of_gaussian_families() {
        let l = SpectralDensity::gaussian_isotropic(1.0).unwrap().lambda_matrix();
        assert_eq!((l.var_x, l.var_t, l.cov_xt, l.det), (1.0, 1.0, 0.0, 1.0));
        let d = SpectralDensity::gaussian_anisotropic(2.0, 1.0).unwrap();
        let l = d.lambda_matrix();
        assert!((l.var_x - 4.0).abs() < 1e-14 && (l.det - 4.0).abs() < 1e-14);
        // Direct integration agrees with the closed form.
        assert!((d.moment_by_quadrature(2, 0) - 4.0).abs() < 1e-9);
        assert!(d.moment_by_quadrature(1, 1).abs() < 1e-12);
    }

    #[test]
    fn tabulated_moments_match_quadrature_and_even_table_has_no_cross_term() {
        let n = 11;
        let nodes: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let values: Vec<f64> = nodes
            .iter()
            .flat_map(|&k| nodes.iter().map(move |&w| (-(k * k) - 0.5 * w * w).exp()))
            .collect();
        let d = SpectralDensity::tabulated(DensityTable { k: nodes.clone(), omega: nodes, values }).unwrap();
        let l = d.lambda_matrix();
        assert!(l.cov_xt.abs() < 1e-14);
        assert!((l.var_x - d.moment_by_quadrature(2, 0)).abs() < 1e-10);
        assert!((l.var_t - d.moment_by_quadrature(0, 2)).abs() < 1e-10);
        assert!(d.check_conditions(3, 3).passes());
    }

    #[test]
    fn gaussian_conditions_pass() {
        let r = SpectralDensity::gaussian_isotropic(1.0).unwrap().check_conditions(3, 3);
        assert!(r.passes());
        assert!((r.moment_k - 15.0).abs() < 1e-12);
        assert!(r.normalization_residual <= 1e-10);
    }

    #[test]
    fn tabulated_sampler_reproduces_second_moment() {
        let d = SpectralDensity::tabulated(box_table(7)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let mut m2 = 0.0;
        for _ in 0..n {
            let (k, w) = d.sample(&mut rng);
            assert!(k.abs() <= 1.0 && w.abs() <= 1.0);
            m2 += k * k;
        }
        m2 /= n as f64;
        // Uniform on [-1,1]: E k^2 = 1/3, sd of k^2 about 0.3.
        assert!((m2 - 1.0 / 3.0).abs() < 4.0 * 0.3 / (n as f64).sqrt());
    }

    #[test]
    fn quadrature_evaluator_reports_convergence() {
        let ev = CorrelationEvaluator::quadrature_only(SpectralDensity::gaussian_isotropic(1.0).unwrap());
        let v = ev.evaluate(1.0, 0.5).unwrap();
        assert!((v.value - (-(1.0 + 0.25) / 2.0f64).exp()).abs() < 1e-10);
        assert_eq!(v.method, CorrelationMethod::Quadrature);
    }

    #[test]
    fn csv_roundtrip_builds_rectangular_table() {
        let dir = std::env::temp_dir().join(format!("amplab-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.csv");
        let mut s = String::from("k,omega,density\n");
        for k in [-1.0, 0.0, 1.0] {
            for w in [-1.0, 0.0, 1.0] {
                s.push_str(&format!("{k},{w},1\n"));
            }
        }
        std::fs::write(&path, s).unwrap();
        let d = SpectralDensity::from_csv(&path).unwrap();
        assert!((d.rescale_factor() - 0.25).abs() < 1e-14);
        std::fs::write(&path, "k,omega,density\n0,0,1\n1,0,1\n0,1,1\n").unwrap();
        assert!(read_density_csv(&path).is_err());
        std::fs::write(&path, "k,w,d\n0,0,1\n").unwrap();
        assert!(read_density_csv(&path).is_err());
    }
}
