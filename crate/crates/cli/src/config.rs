//! Run configuration: one JSON file with a section per stage. Flags
//! override file values; unknown keys are rejected.

use std::path::{Path, PathBuf};

use amplab_core::heat_solver::Scheme;
use amplab_core::spectral_model::{make_spectral_density, read_density_csv, SpectralDensity, SpectralFamily, SpectralParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub spectral: SpectralSection,
    pub grid: GridSection,
    pub couplings: CouplingSection,
    pub fk: FkSection,
    pub optimizer: OptimizerSection,
    pub amplification: AmplificationSection,
    pub extremes: ExtremesSection,
    pub poisson: PoissonSection,
    pub scan: ScanSection,
    pub iid: IidSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out: PathBuf::from("amplab-out"),
            spectral: SpectralSection::default(),
            grid: GridSection::default(),
            couplings: CouplingSection::default(),
            fk: FkSection::default(),
            optimizer: OptimizerSection::default(),
            amplification: AmplificationSection::default(),
            extremes: ExtremesSection::default(),
            poisson: PoissonSection::default(),
            scan: ScanSection::default(),
            iid: IidSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralSection {
    pub family: SpectralFamily,
    pub sigma_k: Option<f64>,
    pub sigma_omega: Option<f64>,
    /// `k,omega,density` CSV for the tabulated family, relative to the config file.
    pub table: Option<PathBuf>,
}

impl Default for SpectralSection {
    fn default() -> Self {
        SpectralSection { family: SpectralFamily::GaussianIsotropic, sigma_k: Some(1.0), sigma_omega: None, table: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    /// Spatial period of the field and solver domains.
    pub length: f64,
    /// Spatial nodes; `None` uses eight per correlation length.
    pub n_x: Option<usize>,
    /// Horizon `T`.
    pub duration: f64,
    /// Solver steps; `None` applies the default step rule.
    pub n_t: Option<usize>,
    /// Time step of synthesized lattices; `None` uses 1/16 correlation time.
    pub field_dt: Option<f64>,
    pub scheme: Scheme,
    /// Nyström nodes for path spectra.
    pub n_q: usize,
    /// Interior breakpoints of optimized paths.
    pub n_p: usize,
    /// Modes in mode-sum fields.
    pub modes: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            length: 64.0,
            n_x: None,
            duration: 1.0,
            n_t: None,
            field_dt: None,
            scheme: Scheme::StrangSplitting,
            n_q: 200,
            n_p: 16,
            modes: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingSection {
    pub g: Vec<f64>,
    /// Read `g` as multiples of the estimated critical coupling.
    pub relative_to_gc: bool,
}

impl Default for CouplingSection {
    fn default() -> Self {
        CouplingSection { g: vec![0.1], relative_to_gc: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FkSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub x: Vec<f64>,
}

impl Default for FkSection {
    fn default() -> Self {
        FkSection { n_paths: 20_000, n_steps: 256, x: vec![0.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSection {
    pub random_starts: usize,
    pub max_iters: u64,
    pub n_q_search: usize,
    pub start_scale: f64,
    pub simplex_step: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection { random_starts: 8, max_iters: 3000, n_q_search: 64, start_scale: 1.0, simplex_step: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplificationSection {
    /// Run the Monte Carlo check of the product formula in `spectrum`.
    pub monte_carlo: bool,
    pub n_realizations: usize,
    pub action_nodes: usize,
}

impl Default for AmplificationSection {
    fn default() -> Self {
        AmplificationSection { monte_carlo: false, n_realizations: 10_000, action_nodes: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtremesSection {
    /// Half-width of the box for the field-maximum check.
    pub r: f64,
    pub n_realizations: usize,
    pub spacing: f64,
    pub levels: usize,
    pub window: (f64, f64),
    /// Points of the `r,pdf,cdf` table.
    pub density_points: usize,
}

impl Default for ExtremesSection {
    fn default() -> Self {
        ExtremesSection { r: 8.0, n_realizations: 10_000, spacing: 0.125, levels: 5, window: (1e-3, 1e-1), density_points: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoissonSection {
    pub a: Vec<f64>,
    pub tolerance: f64,
}

impl Default for PoissonSection {
    fn default() -> Self {
        PoissonSection { a: vec![0.1, 0.5, 1.0, 5.0], tolerance: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSection {
    /// Window lengths; `None` gives octaves from 8 correlation lengths to `l_max`.
    pub lengths: Option<Vec<f64>>,
    /// Largest window in correlation lengths.
    pub l_max: f64,
    pub realizations: usize,
    pub phi_exponent: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub epsilons: Vec<f64>,
    pub margin: f64,
}

impl Default for ScanSection {
    fn default() -> Self {
        use amplab_core::diagnostics::*;
        let th = Thresholds::default();
        ScanSection {
            lengths: None,
            l_max: DEFAULT_L_MAX_CORRELATION_LENGTHS,
            realizations: 32,
            phi_exponent: DEFAULT_PHI_EXPONENT,
            theta1: th.theta1,
            theta2: th.theta2,
            theta3: th.theta3,
            epsilons: vec![0.25, 0.5],
            margin: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IidSection {
    pub alphas: Vec<f64>,
    pub n: Vec<usize>,
    pub repetitions: usize,
}

impl Default for IidSection {
    fn default() -> Self {
        IidSection { alphas: vec![0.5, 1.5, 2.5], n: vec![100, 1_000, 10_000, 100_000, 1_000_000], repetitions: 100 }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub g: Option<Vec<f64>>,
    pub duration: Option<f64>,
}

/// Dotted paths of keys in `given` that `known` does not have.
fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, value) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(value, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Parses a config document, rejecting unknown keys.
pub fn parse_config_value(value: Value) -> Result<RunConfig, CliError> {
    let known = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let mut unknown = vec![];
    unknown_keys(&value, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

/// Reads the file (if any), applies flag overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let mut cfg = parse_config_value(value)?;
            if let (Some(table), Some(dir)) = (&cfg.spectral.table, p.parent()) {
                if table.is_relative() {
                    cfg.spectral.table = Some(dir.join(table));
                }
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.out {
        cfg.out = o.clone();
    }
    if let Some(g) = &overrides.g {
        cfg.couplings.g = g.clone();
    }
    if let Some(t) = overrides.duration {
        cfg.grid.duration = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be >= {min}, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(s) = self.spectral.sigma_k {
            positive("spectral.sigma_k", s)?;
        }
        if let Some(s) = self.spectral.sigma_omega {
            positive("spectral.sigma_omega", s)?;
        }
        positive("grid.length", self.grid.length)?;
        positive("grid.duration", self.grid.duration)?;
        if let Some(n) = self.grid.n_x {
            at_least("grid.n_x", n, 16)?;
            if n % 2 != 0 {
                return Err(CliError::Config(format!("grid.n_x must be even, got {n}")));
            }
        }
        if let Some(n) = self.grid.n_t {
            at_least("grid.n_t", n, 1)?;
        }
        if let Some(dt) = self.grid.field_dt {
            positive("grid.field_dt", dt)?;
        }
        at_least("grid.n_q", self.grid.n_q, 8)?;
        at_least("grid.n_p", self.grid.n_p, 2)?;
        at_least("grid.modes", self.grid.modes, 1)?;
        if self.couplings.g.is_empty() {
            return Err(CliError::Config("couplings.g must not be empty".into()));
        }
        for &g in &self.couplings.g {
            if !(g.is_finite() && g >= 0.0) {
                return Err(CliError::Config(format!("couplings.g must be finite and >= 0, got {g}")));
            }
        }
        at_least("fk.n_paths", self.fk.n_paths, 2)?;
        at_least("fk.n_steps", self.fk.n_steps, 2)?;
        if self.fk.n_steps % 2 != 0 {
            return Err(CliError::Config(format!("fk.n_steps must be even, got {}", self.fk.n_steps)));
        }
        positive("optimizer.start_scale", self.optimizer.start_scale)?;
        positive("optimizer.simplex_step", self.optimizer.simplex_step)?;
        at_least("optimizer.n_q_search", self.optimizer.n_q_search, 8)?;
        at_least("amplification.n_realizations", self.amplification.n_realizations, 2)?;
        at_least("amplification.action_nodes", self.amplification.action_nodes, 1)?;
        positive("extremes.r", self.extremes.r)?;
        at_least("extremes.n_realizations", self.extremes.n_realizations, 1)?;
        at_least("extremes.levels", self.extremes.levels, 1)?;
        at_least("extremes.density_points", self.extremes.density_points, 2)?;
        let (lo, hi) = self.extremes.window;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(CliError::Config(format!("extremes.window must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")));
        }
        for &a in &self.poisson.a {
            positive("poisson.a", a)?;
        }
        positive("poisson.tolerance", self.poisson.tolerance)?;
        positive("scan.l_max", self.scan.l_max)?;
        at_least("scan.realizations", self.scan.realizations, 1)?;
        positive("scan.margin", self.scan.margin)?;
        if !(self.scan.phi_exponent > 0.0 && self.scan.phi_exponent < 1.0) {
            return Err(CliError::Config(format!("scan.phi_exponent must lie in (0, 1), got {}", self.scan.phi_exponent)));
        }
        for (name, v) in [("scan.theta1", self.scan.theta1), ("scan.theta2", self.scan.theta2), ("scan.theta3", self.scan.theta3)] {
            positive(name, v)?;
        }
        for &a in &self.iid.alphas {
            positive("iid.alphas", a)?;
        }
        for &n in &self.iid.n {
            at_least("iid.n", n, 3)?;
        }
        at_least("iid.repetitions", self.iid.repetitions, 4)?;
        Ok(())
    }

    pub fn density(&self) -> Result<SpectralDensity, CliError> {
        let table = match (&self.spectral.family, &self.spectral.table) {
            (SpectralFamily::TabulatedGrid, Some(p)) => Some(read_density_csv(p)?),
            (SpectralFamily::TabulatedGrid, None) => {
                return Err(CliError::Config("spectral.table is required for tabulated-grid".into()))
            }
            _ => None,
        };
        let params = SpectralParams { sigma_k: self.spectral.sigma_k, sigma_omega: self.spectral.sigma_omega, table };
        Ok(make_spectral_density(self.spectral.family, &params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn unknown_keys_are_listed() {
        let err = parse_config_value(json!({"grid": {"lenght": 3.0}, "colour": 1})).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid.lenght") && msg.contains("colour"), "{msg}");
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config_value(json!({"spectral": {"family": "gaussian-isotropic"}, "grid": {"duration": 2.0}})).unwrap();
        assert_eq!(cfg.grid.duration, 2.0);
        assert_eq!(cfg.grid.n_q, 200);
        assert_eq!(cfg.fk, FkSection::default());
    }

    #[test]
    fn negative_coupling_names_the_field() {
        let ov = Overrides { g: Some(vec![-0.5]), ..Default::default() };
        let err = parse_config(None, &ov).unwrap_err();
        assert!(err.to_string().contains("couplings.g"));
    }

    #[test]
    fn serialized_config_reparses() {
        let cfg = RunConfig::default();
        let again = parse_config_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}
