//! Grid solver for `∂ₜψ = ½∂ₓ²ψ + g S² ψ`, `ψ(x, 0) = 1`, on a periodic
//! interval, for one frozen realization of `S`.
//!
//! Strang splitting: half-step multiplication by `exp(g S² dt/2)`, a full
//! diffusion step, another half-step. Diffusion is either the exact
//! spectral multiplier or a Crank–Nicolson step.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::field_synthesis::{FieldRealization, LatticeField, SpaceTimeField};

/// Upper limit on `g · max S² · dt` per step.
pub const OVERFLOW_GUARD: f64 = 10.0;
/// Stored values are rescaled once they exceed this.
const RENORMALIZE_ABOVE: f64 = 1e200;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    #[serde(alias = "strang-spectral")]
    StrangSplitting,
    CrankNicolsonImex,
}

/// Spatial interval `[-L/2, L/2)` with `n_x` periodic nodes and `n_t`
/// steps over `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverGrid {
    pub length: f64,
    pub n_x: usize,
    pub duration: f64,
    pub n_t: usize,
    pub scheme: Scheme,
}

impl SolverGrid {
    pub fn new(length: f64, n_x: usize, duration: f64, n_t: usize, scheme: Scheme) -> Result<Self> {
        let grid = SolverGrid { length, n_x, duration, n_t, scheme };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with the default step rule `dt = min(dx²/2, T/1024, 0.1/(g max S²))`.
    pub fn with_default_steps(length: f64, n_x: usize, duration: f64, g: f64, max_s2: f64, scheme: Scheme) -> Result<Self> {
        ensure_positive("length", length)?;
        ensure_positive("duration", duration)?;
        let dx = length / n_x.max(1) as f64;
        let mut dt = (0.5 * dx * dx).min(duration / 1024.0);
        if g > 0.0 && max_s2 > 0.0 {
            dt = dt.min(0.1 / (g * max_s2));
        }
        let n_t = (duration / dt).ceil().max(1.0) as usize;
        SolverGrid::new(length, n_x, duration, n_t, scheme)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("length", self.length)?;
        ensure_positive("duration", self.duration)?;
        if self.n_x < 16 || self.n_x % 2 != 0 {
            return Err(Error::parameter("n_x", format!("must be even and >= 16, got {}", self.n_x)));
        }
        if self.n_t == 0 {
            return Err(Error::parameter("n_t", "must be >= 1"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.n_t as f64
    }

    pub fn x0(&self) -> f64 {
        -0.5 * self.length
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x0() + j as f64 * self.dx()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Keep every `k`-th time level (plus the last); `None` keeps only
    /// `t = 0` and `t = T`.
    pub snapshot_every: Option<usize>,
}

/// Stored time levels of `ψ`. Level `i` holds `ψ = exp(log_scale[i]) · rows[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionField {
    pub grid: SolverGrid,
    pub g: f64,
    pub provenance: String,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub log_scale: Vec<f64>,
    /// Number of times the stored values were rescaled to avoid overflow.
    pub renormalizations: usize,
}

impl SolutionField {
    pub fn x_grid(&self) -> Vec<f64> {
        (0..self.grid.n_x).map(|j| self.grid.x(j)).collect()
    }

    /// `E(x, g) = ψ(x, T)`. Values beyond `f64` range come back infinite;
    /// use [`SolutionField::terminal_log_profile`] then.
    pub fn terminal_profile(&self) -> Vec<f64> {
        let s = *self.log_scale.last().expect("at least two levels");
        let row = self.rows.last().expect("at least two levels");
        if s == 0.0 {
            row.clone()
        } else {
            row.iter().map(|u| u * s.exp()).collect()
        }
    }

    pub fn terminal_log_profile(&self) -> Vec<f64> {
        let s = *self.log_scale.last().expect("at least two levels");
        self.rows.last().expect("at least two levels").iter().map(|u| s + u.ln()).collect()
    }

    /// Stored levels as a lattice, provided they are equally spaced.
    pub fn to_lattice(&self) -> Result<LatticeField> {
        if self.renormalizations > 0 {
            return Err(Error::Validation("solution was rescaled; its values overflow f64".into()));
        }
        let n_t = self.times.len();
        let dt = self.times[1] - self.times[0];
        let uniform = self.times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt);
        if !uniform {
            return Err(Error::Validation("snapshot times are not equally spaced".into()));
        }
        Ok(LatticeField {
            n_x: self.grid.n_x,
            n_t,
            dx: self.grid.dx(),
            dt,
            values: self.rows.iter().flatten().copied().collect(),
        })
    }

    pub fn write_profile_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_profile_csv(path, &self.x_grid(), &self.terminal_profile())
    }
}

/// `E(x, g)` as a free function.
pub fn terminal_profile(sol: &SolutionField) -> Vec<f64> {
    sol.terminal_profile()
}

pub fn write_profile_csv(path: impl AsRef<Path>, x: &[f64], e: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,E")?;
    for (x, e) in x.iter().zip(e) {
        writeln!(out, "{x},{e}")?;
    }
    out.flush()?;
    Ok(())
}

enum Diffuser {
    Spectral {
        forward: Arc<dyn Fft<f64>>,
        inverse: Arc<dyn Fft<f64>>,
        multiplier: Vec<f64>,
        buf: Vec<Complex64>,
        scratch: Vec<Complex64>,
    },
    CrankNicolson {
        r: f64,
        rhs: Vec<f64>,
        work: Vec<f64>,
        z: Vec<f64>,
        diag_c: Vec<f64>,
        gamma: f64,
    },
}

impl Diffuser {
    fn new(grid: &SolverGrid) -> Self {
        let n = grid.n_x;
        let dt = grid.dt();
        match grid.scheme {
            Scheme::StrangSplitting => {
                let mut planner = FftPlanner::new();
                let forward = planner.plan_fft_forward(n);
                let inverse = planner.plan_fft_inverse(n);
                let scratch_len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
                let multiplier = (0..n)
                    .map(|p| {
                        let m = if p <= n / 2 { p as f64 } else { p as f64 - n as f64 };
                        let kappa = 2.0 * std::f64::consts::PI * m / grid.length;
                        (-0.5 * kappa * kappa * dt).exp() / n as f64
                    })
                    .collect();
                Diffuser::Spectral {
                    forward,
                    inverse,
                    multiplier,
                    buf: vec![Complex64::new(0.0, 0.0); n],
                    scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
                }
            }
            Scheme::CrankNicolsonImex => {
                let dx = grid.dx();
                // (1 + 2r) u_j - r (u_{j-1} + u_{j+1}) = rhs, periodic.
                let r = 0.25 * dt / (dx * dx);
                let (a, b) = (-r, 1.0 + 2.0 * r);
                let gamma = -b;
                let mut diag_c = vec![0.0; n];
                let mut z = vec![0.0; n];
                // Precompute the Sherman–Morrison correction vector z = A'^{-1} u.
                let mut u = vec![0.0; n];
                u[0] = gamma;
                u[n - 1] = a;
                let diag = |i: usize| {
                    if i == 0 {
                        b - gamma
                    } else if i == n - 1 {
                        b - a * a / gamma
                    } else {
                        b
                    }
                };
                thomas(a, &diag, &u, &mut z, &mut diag_c);
                Diffuser::CrankNicolson { r, rhs: vec![0.0; n], work: vec![0.0; n], z, diag_c, gamma }
            }
        }
    }

    fn apply(&mut self, psi: &mut [f64]) {
        match self {
            Diffuser::Spectral { forward, inverse, multiplier, buf, scratch } => {
                for (b, &v) in buf.iter_mut().zip(psi.iter()) {
                    *b = Complex64::new(v, 0.0);
                }
                forward.process_with_scratch(buf, scratch);
                for (b, m) in buf.iter_mut().zip(multiplier.iter()) {
                    *b *= *m;
                }
                inverse.process_with_scratch(buf, scratch);
                for (v, b) in psi.iter_mut().zip(buf.iter()) {
                    *v = b.re;
                }
            }
            Diffuser::CrankNicolson { r, rhs, work, z, diag_c, gamma } => {
                let n = psi.len();
                let (r, gamma) = (*r, *gamma);
                for j in 0..n {
                    let left = psi[(j + n - 1) % n];
                    let right = psi[(j + 1) % n];
                    rhs[j] = (1.0 - 2.0 * r) * psi[j] + r * (left + right);
                }
                let (a, b) = (-r, 1.0 + 2.0 * r);
                let diag = |i: usize| {
                    if i == 0 {
                        b - gamma
                    } else if i == n - 1 {
                        b - a * a / gamma
                    } else {
                        b
                    }
                };
                thomas(a, &diag, rhs, work, diag_c);
                let fact = (work[0] + a * work[n - 1] / gamma) / (1.0 + z[0] + a * z[n - 1] / gamma);
                for j in 0..n {
                    psi[j] = work[j] - fact * z[j];
                }
            }
        }
    }
}

/// Solves a constant-coefficient tridiagonal system with off-diagonal `a`.
fn thomas(a: f64, diag: &dyn Fn(usize) -> f64, rhs: &[f64], out: &mut [f64], c: &mut [f64]) {
    let n = rhs.len();
    let mut beta = diag(0);
    out[0] = rhs[0] / beta;
    for i in 1..n {
        c[i] = a / beta;
        beta = diag(i) - a * c[i];
        out[i] = (rhs[i] - a * out[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        out[i] -= c[i + 1] * out[i + 1];
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Runs the solver on one field realization.
pub fn solve(field: &FieldRealization, g: f64, grid: &SolverGrid, options: &SolveOptions) -> Result<SolutionField> {
    solve_field(field, &field.provenance, g, grid, options)
}

/// Same as [`solve`] for any field implementation.
pub fn solve_field<F: SpaceTimeField + ?Sized>(
    field: &F,
    provenance: &str,
    g: f64,
    grid: &SolverGrid,
    options: &SolveOptions,
) -> Result<SolutionField> {
    if !(g.is_finite() && g >= 0.0) {
        return Err(Error::parameter("g", format!("must be finite and >= 0, got {g}")));
    }
    grid.validate()?;
    if options.snapshot_every == Some(0) {
        return Err(Error::parameter("snapshot_every", "must be >= 1"));
    }
    let n = grid.n_x;
    let dt = grid.dt();
    let (x0, dx) = (grid.x0(), grid.dx());

    let mut psi = vec![1.0; n];
    let mut scale = 0.0f64;
    let mut renormalizations = 0;
    let mut times = vec![0.0];
    let mut rows = vec![psi.clone()];
    let mut log_scale = vec![0.0];

    let mut diffuser = Diffuser::new(grid);
    let mut s_now = vec![0.0; n];
    let mut s_next = vec![0.0; n];
    let mut fac = vec![0.0; n];
    field.fill_row(x0, dx, 0.0, &mut s_now);

    let half_factors = |s: &[f64], out: &mut [f64], step: usize| -> Result<()> {
        let mut worst = 0.0f64;
        for (o, v) in out.iter_mut().zip(s) {
            let a = g * v * v * dt;
            worst = worst.max(a);
            *o = (0.5 * a).exp();
        }
        if worst > OVERFLOW_GUARD {
            return Err(Error::Stability(format!(
                "g * max S^2 * dt = {worst:.3} exceeds {OVERFLOW_GUARD} at step {step}; use dt <= {:.3e}",
                dt * OVERFLOW_GUARD / worst
            )));
        }
        Ok(())
    };

    for step in 0..grid.n_t {
        let t_next = if step + 1 == grid.n_t { grid.duration } else { (step + 1) as f64 * dt };
        if g > 0.0 {
            half_factors(&s_now, &mut fac, step)?;
            psi.iter_mut().zip(&fac).for_each(|(p, f)| *p *= f);
        }
        let (lo, hi) = min_max(&psi);
        if lo != hi {
            diffuser.apply(&mut psi);
            // The heat flow obeys the maximum principle; trim roundoff overshoot.
            psi.iter_mut().for_each(|p| *p = p.clamp(lo, hi));
        }
        if g > 0.0 {
            field.fill_row(x0, dx, t_next, &mut s_next);
            half_factors(&s_next, &mut fac, step)?;
            psi.iter_mut().zip(&fac).for_each(|(p, f)| *p *= f);
            std::mem::swap(&mut s_now, &mut s_next);
        }
        let (_, hi) = min_max(&psi);
        if !hi.is_finite() || psi.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite solution value at step {step}")));
        }
        if hi > RENORMALIZE_ABOVE {
            scale += hi.ln();
            psi.iter_mut().for_each(|p| *p /= hi);
            renormalizations += 1;
        }
        let last = step + 1 == grid.n_t;
        if last || options.snapshot_every.is_some_and(|k| (step + 1) % k == 0) {
            times.push(t_next);
            rows.push(psi.clone());
            log_scale.push(scale);
        }
    }

    Ok(SolutionField {
        grid: *grid,
        g,
        provenance: provenance.to_string(),
        times,
        rows,
        log_scale,
        renormalizations,
    })
}
