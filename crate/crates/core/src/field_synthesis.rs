//! Realizations of the stationary Gaussian field `S(x, t)`.
//!
//! Two representations: a random mode sum, which can be evaluated exactly
//! anywhere, and a lattice produced by FFT synthesis, which is exactly
//! Gaussian and cheap to read row by row.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{ensure_positive, Error, Result};
use crate::rng::{self, Purpose};
use crate::spectral_model::{Covariance, SpectralDensity};

/// Spectral mass allowed outside the cutoffs used by the resolution rule.
pub const RESOLUTION_TAIL_MASS: f64 = 1e-6;

/// A real field on the space-time plane.
pub trait SpaceTimeField: Sync {
    fn value(&self, x: f64, t: f64) -> f64;

    /// Writes `S(x0 + j dx, t)` for `j = 0..out.len()`.
    fn fill_row(&self, x0: f64, dx: f64, t: f64, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.value(x0 + j as f64 * dx, t);
        }
    }

    /// Largest value of `S²` this field can take, if cheaply known.
    fn square_bound(&self) -> Option<f64> {
        None
    }
}

/// `S ≡ c`, a test input outside the Gaussian ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantField(pub f64);

impl SpaceTimeField for ConstantField {
    fn value(&self, _x: f64, _t: f64) -> f64 {
        self.0
    }

    fn square_bound(&self) -> Option<f64> {
        Some(self.0 * self.0)
    }
}

/// `S = √(2/M) Σ cos(k_m x + ω_m t + φ_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeTable {
    pub k: Vec<f64>,
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
}

impl ModeTable {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn amplitude(&self) -> f64 {
        (2.0 / self.len() as f64).sqrt()
    }
}

impl SpaceTimeField for ModeTable {
    fn value(&self, x: f64, t: f64) -> f64 {
        let s: f64 = self
            .k
            .iter()
            .zip(&self.omega)
            .zip(&self.phase)
            .map(|((k, w), p)| (k * x + w * t + p).cos())
            .sum();
        self.amplitude() * s
    }

    fn fill_row(&self, x0: f64, dx: f64, t: f64, out: &mut [f64]) {
        // Rotate a phasor along the row and resynchronize every few steps.
        const RESYNC: usize = 32;
        out.iter_mut().for_each(|o| *o = 0.0);
        for ((&k, &w), &p) in self.k.iter().zip(&self.omega).zip(&self.phase) {
            let step = Complex64::from_polar(1.0, k * dx);
            for (block, chunk) in out.chunks_mut(RESYNC).enumerate() {
                let j0 = block * RESYNC;
                let mut z = Complex64::from_polar(1.0, k * (x0 + j0 as f64 * dx) + w * t + p);
                for o in chunk.iter_mut() {
                    *o += z.re;
                    z *= step;
                }
            }
        }
        let a = self.amplitude();
        out.iter_mut().for_each(|o| *o *= a);
    }

    fn square_bound(&self) -> Option<f64> {
        Some(2.0 * self.len() as f64)
    }
}

/// Field values on `x_j = -L/2 + j dx` (periodic, `j < n_x`) and
/// `t_n = n dt` (`n < n_t`), stored row-major by time.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField {
    pub n_x: usize,
    pub n_t: usize,
    pub dx: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl LatticeField {
    pub fn length(&self) -> f64 {
        self.n_x as f64 * self.dx
    }

    pub fn duration(&self) -> f64 {
        (self.n_t - 1) as f64 * self.dt
    }

    pub fn x0(&self) -> f64 {
        -0.5 * self.length()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_x..(n + 1) * self.n_x]
    }

    pub fn node(&self, j: usize, n: usize) -> f64 {
        self.values[n * self.n_x + j]
    }

    fn time_weights(&self, t: f64) -> (usize, f64) {
        let s = (t / self.dt).clamp(0.0, (self.n_t - 1) as f64);
        let n = (s.floor() as usize).min(self.n_t.saturating_sub(2));
        (n, s - n as f64)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= -1e-12 * self.dt && t <= self.duration() * (1.0 + 1e-12) + 1e-12
    }

    /// Bilinear interpolation; `x` wraps, `t` must lie in the slab.
    pub fn evaluate(&self, x: f64, t: f64) -> Result<f64> {
        if !self.contains(t) || !x.is_finite() {
            return Err(Error::Domain(format!(
                "point ({x}, {t}) lies outside the lattice slab t in [0, {}]",
                self.duration()
            )));
        }
        Ok(self.value(x, t))
    }
}

impl SpaceTimeField for LatticeField {
    fn value(&self, x: f64, t: f64) -> f64 {
        let u = ((x - self.x0()) / self.dx).rem_euclid(self.n_x as f64);
        let j = (u.floor() as usize).min(self.n_x - 1);
        let fx = u - j as f64;
        let j1 = (j + 1) % self.n_x;
        if self.n_t == 1 {
            return (1.0 - fx) * self.node(j, 0) + fx * self.node(j1, 0);
        }
        let (n, ft) = self.time_weights(t);
        let a = (1.0 - fx) * self.node(j, n) + fx * self.node(j1, n);
        let b = (1.0 - fx) * self.node(j, n + 1) + fx * self.node(j1, n + 1);
        if ft == 0.0 {
            a
        } else {
            (1.0 - ft) * a + ft * b
        }
    }

    fn fill_row(&self, x0: f64, dx: f64, t: f64, out: &mut [f64]) {
        let offset = (x0 - self.x0()) / self.dx;
        let aligned = (dx - self.dx).abs() <= 1e-12 * self.dx && (offset - offset.round()).abs() <= 1e-9;
        if !aligned || self.n_t == 1 {
            for (j, o) in out.iter_mut().enumerate() {
                *o = self.value(x0 + j as f64 * dx, t);
            }
            return;
        }
        let shift = (offset.round() as i64).rem_euclid(self.n_x as i64) as usize;
        let (n, ft) = self.time_weights(t);
        let (r0, r1) = (self.row(n), self.row(n + 1));
        for (j, o) in out.iter_mut().enumerate() {
            let idx = (shift + j) % self.n_x;
            *o = if ft == 0.0 { r0[idx] } else { (1.0 - ft) * r0[idx] + ft * r1[idx] };
        }
    }

    fn square_bound(&self) -> Option<f64> {
        Some(self.values.iter().map(|v| v * v).fold(0.0, f64::max))
    }
}

/// Storage form of a realization.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldRepr {
    ModeSum(ModeTable),
    Lattice(LatticeField),
    Constant(ConstantField),
}

/// One realization with its reproducibility key and the density it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldRealization {
    pub repr: FieldRepr,
    pub seed: u64,
    pub provenance: String,
}

impl FieldRealization {
    pub fn constant(c: f64) -> Self {
        FieldRealization {
            repr: FieldRepr::Constant(ConstantField(c)),
            seed: 0,
            provenance: format!("constant({c})"),
        }
    }

    pub fn as_lattice(&self) -> Option<&LatticeField> {
        match &self.repr {
            FieldRepr::Lattice(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_modes(&self) -> Option<&ModeTable> {
        match &self.repr {
            FieldRepr::ModeSum(m) => Some(m),
            _ => None,
        }
    }

    fn inner(&self) -> &dyn SpaceTimeField {
        match &self.repr {
            FieldRepr::ModeSum(m) => m,
            FieldRepr::Lattice(l) => l,
            FieldRepr::Constant(c) => c,
        }
    }
}

impl SpaceTimeField for FieldRealization {
    fn value(&self, x: f64, t: f64) -> f64 {
        self.inner().value(x, t)
    }

    fn fill_row(&self, x0: f64, dx: f64, t: f64, out: &mut [f64]) {
        self.inner().fill_row(x0, dx, t, out)
    }

    fn square_bound(&self) -> Option<f64> {
        self.inner().square_bound()
    }
}

/// Checked point evaluation: lattice fields reject points outside their slab.
pub fn evaluate(field: &FieldRealization, x: f64, t: f64) -> Result<f64> {
    match &field.repr {
        FieldRepr::Lattice(l) => l.evaluate(x, t),
        _ => Ok(field.value(x, t)),
    }
}

/// Draws an `m`-mode realization with wavevectors sampled from `D`.
pub fn sample_modes(density: &SpectralDensity, m: usize, seed: u64) -> Result<FieldRealization> {
    if m == 0 {
        return Err(Error::parameter("modes", "must be >= 1"));
    }
    let mut rng = rng::stream(seed, Purpose::Modes, 0);
    let mut table = ModeTable {
        k: Vec::with_capacity(m),
        omega: Vec::with_capacity(m),
        phase: Vec::with_capacity(m),
    };
    for _ in 0..m {
        let (k, w) = density.sample(&mut rng);
        table.k.push(k);
        table.omega.push(w);
        table.phase.push(2.0 * PI * rng.random::<f64>());
    }
    Ok(FieldRealization {
        repr: FieldRepr::ModeSum(table),
        seed,
        provenance: density.id(),
    })
}

/// Lattice geometry for FFT synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    /// Spatial period `L`; nodes cover `[-L/2, L/2)`.
    pub length: f64,
    pub n_x: usize,
    /// Slab duration `T`; rows cover `[0, T]` inclusive.
    pub duration: f64,
    pub n_t: usize,
    /// Extra time appended to the periodic synthesis box so the slab does
    /// not see its own wrap-around. `None` uses 8 temporal correlation lengths.
    pub time_padding: Option<f64>,
}

impl GridSpec {
    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    pub fn dt(&self) -> f64 {
        if self.n_t > 1 {
            self.duration / (self.n_t - 1) as f64
        } else {
            self.duration.max(1.0)
        }
    }

    /// Coarsest grid satisfying the resolution rule for `density`.
    pub fn resolving(density: &SpectralDensity, length: f64, duration: f64) -> Self {
        let (k_eff, w_eff) = density.effective_cutoffs(RESOLUTION_TAIL_MASS);
        let mut n_x = (length * k_eff / PI).ceil() as usize;
        n_x += n_x % 2;
        let n_t = ((duration * w_eff / PI).ceil() as usize + 1).max(2);
        GridSpec { length, n_x: n_x.max(2), duration, n_t, time_padding: None }
    }
}

/// Diagnostics from one FFT synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SynthesisReport {
    /// Largest imaginary part left after the inverse transform.
    pub imaginary_residue: f64,
    /// Rows of the periodic synthesis box (slab plus padding).
    pub box_rows: usize,
    /// Sum of the raw lattice weights before renormalization to 1.
    pub raw_mass: f64,
}

/// Fails with the required spacings if `grid` under-resolves `density`.
pub fn check_resolution(density: &SpectralDensity, grid: &GridSpec) -> Result<()> {
    let (k_eff, w_eff) = density.effective_cutoffs(RESOLUTION_TAIL_MASS);
    let (dx_max, dt_max) = (PI / k_eff, PI / w_eff);
    let dx_ok = grid.dx() <= dx_max * (1.0 + 1e-12);
    let dt_ok = grid.n_t == 1 || grid.dt() <= dt_max * (1.0 + 1e-12);
    if dx_ok && dt_ok {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "grid under-resolves the spectrum: need dx <= {dx_max:.6} and dt <= {dt_max:.6}, got dx = {:.6}, dt = {:.6}",
            grid.dx(),
            grid.dt()
        )))
    }
}

/// FFT synthesis of an exactly Gaussian, spatially periodic lattice field.
pub fn synthesize_grid(density: &SpectralDensity, grid: &GridSpec, seed: u64) -> Result<(FieldRealization, SynthesisReport)> {
    ensure_positive("length", grid.length)?;
    ensure_positive("duration", grid.duration)?;
    if grid.n_x < 2 || grid.n_t < 2 {
        return Err(Error::parameter("grid", "need n_x >= 2 and n_t >= 2"));
    }
    check_resolution(density, grid)?;
    let (dx, dt) = (grid.dx(), grid.dt());
    let padding = match grid.time_padding {
        Some(p) => {
            if !(p >= 0.0) {
                return Err(Error::parameter("time_padding", "must be >= 0"));
            }
            p
        }
        None => 8.0 * density.correlation_lengths().1,
    };
    let mut rows = grid.n_t + (padding / dt).ceil() as usize;
    rows += rows % 2;
    let nx = grid.n_x;
    let dk = 2.0 * PI / grid.length;
    let dw = 2.0 * PI / (rows as f64 * dt);
    let freq = |i: usize, n: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };

    let mut weight = vec![0.0; rows * nx];
    for q in 0..rows {
        let w = freq(q, rows) * dw;
        for p in 0..nx {
            weight[q * nx + p] = density.density(freq(p, nx) * dk, w) * dk * dw;
        }
    }
    let raw_mass: f64 = weight.iter().sum();
    if !(raw_mass > 0.0) {
        return Err(Error::Validation("spectral lattice carries no mass".into()));
    }

    let mut rng = rng::stream(seed, Purpose::Lattice, 0);
    let mut buf = vec![Complex64::new(0.0, 0.0); rows * nx];
    for q in 0..rows {
        let qc = (rows - q) % rows;
        for p in 0..nx {
            let pc = (nx - p) % nx;
            let (a, b) = (q * nx + p, qc * nx + pc);
            if b < a {
                continue;
            }
            let var = weight[a] / raw_mass;
            if a == b {
                let z: f64 = rng.sample(StandardNormal);
                buf[a] = Complex64::new(var.sqrt() * z, 0.0);
            } else {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                let c = Complex64::new(re, im) * (0.5 * var).sqrt();
                buf[a] = c;
                buf[b] = c.conj();
            }
        }
    }

    let mut planner = FftPlanner::new();
    let fft_x = planner.plan_fft_inverse(nx);
    for row in buf.chunks_exact_mut(nx) {
        fft_x.process(row);
    }
    let fft_t = planner.plan_fft_inverse(rows);
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for j in 0..nx {
        for (n, c) in column.iter_mut().enumerate() {
            *c = buf[n * nx + j];
        }
        fft_t.process(&mut column);
        for (n, c) in column.iter().enumerate() {
            buf[n * nx + j] = *c;
        }
    }

    // Lattice frequencies run over index p; node j sits at x = -L/2 + j dx,
    // which only flips the sign of odd spatial modes. The field law is
    // invariant under that shift, so the values are used as they are.
    let imaginary_residue = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let values: Vec<f64> = buf[..grid.n_t * nx].iter().map(|c| c.re).collect();
    let lattice = LatticeField { n_x: nx, n_t: grid.n_t, dx, dt, values };
    Ok((
        FieldRealization { repr: FieldRepr::Lattice(lattice), seed, provenance: density.id() },
        SynthesisReport { imaginary_residue, box_rows: rows, raw_mass },
    ))
}

/// Samples any field on the nodes of `grid`.
pub fn to_lattice(field: &FieldRealization, grid: &GridSpec) -> LatticeField {
    let (dx, dt) = (grid.dx(), grid.dt());
    let x0 = -0.5 * grid.length;
    let mut values = Vec::with_capacity(grid.n_x * grid.n_t);
    for n in 0..grid.n_t {
        let t = n as f64 * dt;
        for j in 0..grid.n_x {
            values.push(field.value(x0 + j as f64 * dx, t));
        }
    }
    LatticeField { n_x: grid.n_x, n_t: grid.n_t, dx, dt, values }
}

/// Ensemble estimate of `E[S(p - lag/2) S(p + lag/2)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CovarianceEstimate {
    pub lag_x: f64,
    pub lag_t: f64,
    pub estimate: f64,
    pub standard_error: f64,
    pub expected: f64,
    pub z_score: f64,
}

/// Covariance at each lag over an ensemble, evaluated at the symmetric pair
/// of points around `center`.
pub fn empirical_covariance<F: SpaceTimeField>(
    ensemble: &[F],
    center: (f64, f64),
    lags: &[(f64, f64)],
    reference: &dyn Covariance,
) -> Result<Vec<CovarianceEstimate>> {
    if ensemble.len() < 100 {
        return Err(Error::parameter("ensemble", format!("needs at least 100 realizations, got {}", ensemble.len())));
    }
    let n = ensemble.len() as f64;
    Ok(lags
        .iter()
        .map(|&(lx, lt)| {
            let (a, b) = ((center.0 - 0.5 * lx, center.1 - 0.5 * lt), (center.0 + 0.5 * lx, center.1 + 0.5 * lt));
            let products: Vec<f64> = ensemble.iter().map(|f| f.value(a.0, a.1) * f.value(b.0, b.1)).collect();
            let mean = products.iter().sum::<f64>() / n;
            let var = products.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let expected = reference.covariance(lx, lt);
            CovarianceEstimate {
                lag_x: lx,
                lag_t: lt,
                estimate: mean,
                standard_error: se,
                expected,
                z_score: if se > 0.0 { (mean - expected) / se } else { 0.0 },
            }
        })
        .collect())
}

/// Magic for stored field lattices.
pub const FIELD_MAGIC: &[u8; 5] = b"SFLD1";
/// Magic for stored solution lattices.
pub const SOLUTION_MAGIC: &[u8; 5] = b"PSI01";

/// Writes a lattice as magic, `n_x`, `n_t`, `dx`, `dt`, seed, then the
/// row-major values, all little-endian.
pub fn write_lattice(path: impl AsRef<Path>, magic: &[u8; 5], lattice: &LatticeField, seed: u64) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(magic)?;
    out.write_all(&(lattice.n_x as u64).to_le_bytes())?;
    out.write_all(&(lattice.n_t as u64).to_le_bytes())?;
    out.write_all(&lattice.dx.to_le_bytes())?;
    out.write_all(&lattice.dt.to_le_bytes())?;
    out.write_all(&seed.to_le_bytes())?;
    for v in &lattice.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a lattice written by [`write_lattice`], returning it with its seed.
pub fn read_lattice(path: impl AsRef<Path>, magic: &[u8; 5]) -> Result<(LatticeField, u64)> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 5];
    input.read_exact(&mut head)?;
    if &head != magic {
        return Err(Error::Validation(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut word = [0u8; 8];
    let mut next = |input: &mut std::io::BufReader<std::fs::File>| -> Result<[u8; 8]> {
        input.read_exact(&mut word)?;
        Ok(word)
    };
    let n_x = u64::from_le_bytes(next(&mut input)?) as usize;
    let n_t = u64::from_le_bytes(next(&mut input)?) as usize;
    let dx = f64::from_le_bytes(next(&mut input)?);
    let dt = f64::from_le_bytes(next(&mut input)?);
    let seed = u64::from_le_bytes(next(&mut input)?);
    let count = n_x
        .checked_mul(n_t)
        .ok_or_else(|| Error::Validation("lattice dimensions overflow".into()))?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(next(&mut input)?));
    }
    Ok((LatticeField { n_x, n_t, dx, dt, values }, seed))
}
