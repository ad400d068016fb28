//! Subcommand implementations. Each stage writes its files through
//! [`Outputs`] and returns the names of any checks that failed.

use amplab_core::diagnostics::{intermittency_scan, iid_regime_demo, Phi, ScanConfig, Thresholds};
use amplab_core::extremes::{
    crossover_radius, epsilon_moment_bound, mc_field_max_tail, mean_r, p_r_poisson, p_r_theta, poisson_pair_check,
    tail_constant, write_density_csv, write_exceedance_csv, ExtremesMcConfig,
};
use amplab_core::feynman_kac::{fk_estimate_with_discretization, FkConfig};
use amplab_core::field_synthesis::{
    sample_modes, synthesize_grid, write_lattice, FieldRealization, GridSpec, FIELD_MAGIC, SOLUTION_MAGIC,
};
use amplab_core::heat_solver::{solve, SolveOptions, SolverGrid};
use amplab_core::path_spectrum::{
    amplification_bound, critical_coupling, eigen_spectrum, kernel_matrix, maximize_mu1, mc_validate_amplification,
    path_amplification, top_eigenvalue, McAmplificationConfig, OptimizerConfig, PiecewiseLinearPath,
};
use amplab_core::rng::{derive_seed, Purpose};
use amplab_core::spectral_model::{CorrelationEvaluator, SpectralDensity};
use serde_json::json;

use crate::config::RunConfig;
use crate::output::Outputs;
use crate::CliError;

struct Seeds {
    field: u64,
    modes: u64,
    paths: u64,
    optimizer: u64,
    amplification: u64,
    extremes: u64,
    scan: u64,
}

impl Seeds {
    fn new(master: u64) -> Self {
        Seeds {
            field: derive_seed(master, Purpose::Lattice, 0),
            modes: derive_seed(master, Purpose::Modes, 0),
            paths: derive_seed(master, Purpose::Paths, 0),
            optimizer: derive_seed(master, Purpose::Optimizer, 0),
            amplification: derive_seed(master, Purpose::Modes, 1),
            extremes: derive_seed(master, Purpose::Lattice, 1),
            scan: derive_seed(master, Purpose::Lattice, 2),
        }
    }

    fn iid(master: u64, k: usize) -> u64 {
        derive_seed(master, Purpose::Pareto, k as u64)
    }
}

pub struct Context<'a> {
    cfg: &'a RunConfig,
    density: SpectralDensity,
    seeds: Seeds,
    pub out: Outputs,
    field: Option<FieldRealization>,
    g_c: Option<f64>,
    failed: Vec<String>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a RunConfig) -> Result<Self, CliError> {
        Ok(Context {
            density: cfg.density()?,
            seeds: Seeds::new(cfg.seed),
            out: Outputs::new(&cfg.out)?,
            cfg,
            field: None,
            g_c: None,
            failed: vec![],
        })
    }

    /// Runs `command`; returns the failed checks.
    pub fn run(mut self, command: &str) -> Result<Vec<String>, CliError> {
        match command {
            "synthesize" => self.synthesize().map(|_| ())?,
            "solve" => self.solve()?,
            "fk" => self.fk()?,
            "spectrum" => self.spectrum()?,
            "gc" => self.gc().map(|_| ())?,
            "extremes" => self.extremes()?,
            "poisson-check" => self.poisson_check()?,
            "scan" => self.scan()?,
            "iid-demo" => self.iid_demo()?,
            "all" => {
                self.synthesize()?;
                self.solve()?;
                self.fk()?;
                self.spectrum()?;
                self.gc()?;
                self.extremes()?;
                self.poisson_check()?;
                self.scan()?;
                self.iid_demo()?;
            }
            other => return Err(CliError::Usage(format!("unknown subcommand '{other}'"))),
        }
        let Context { out, failed, cfg, .. } = self;
        out.finish(command, cfg)?;
        Ok(failed)
    }

    fn field_grid(&self) -> GridSpec {
        let (lx, lt) = self.density.correlation_lengths();
        let g = &self.cfg.grid;
        let n_x = g.n_x.unwrap_or_else(|| {
            let n = (g.length / (lx / 8.0)).ceil() as usize;
            n.max(16) + n % 2
        });
        let dt = g.field_dt.unwrap_or(lt / 16.0);
        let n_t = (g.duration / dt).ceil() as usize + 1;
        GridSpec { length: g.length, n_x, duration: g.duration, n_t: n_t.max(2), time_padding: None }
    }

    fn couplings(&mut self) -> Result<Vec<f64>, CliError> {
        if self.cfg.couplings.relative_to_gc {
            let g_c = self.gc()?;
            Ok(self.cfg.couplings.g.iter().map(|m| m * g_c).collect())
        } else {
            Ok(self.cfg.couplings.g.clone())
        }
    }

    fn synthesize(&mut self) -> Result<FieldRealization, CliError> {
        if let Some(f) = &self.field {
            return Ok(f.clone());
        }
        let grid = self.field_grid();
        let seed = self.seeds.field;
        let density = self.density.clone();
        let field = self.out.stage("synthesize", &[("field", seed)], |out| {
            let (field, report) = synthesize_grid(&density, &grid, seed)?;
            let lattice = field.as_lattice().expect("synthesis returns a lattice");
            write_lattice(out.file("field.sfld")?, FIELD_MAGIC, lattice, seed)?;
            out.write_json(
                "synthesis.json",
                &json!({
                    "density": density.id(),
                    "grid": grid,
                    "dx": grid.dx(),
                    "dt": grid.dt(),
                    "seed": seed,
                    "report": report,
                }),
            )?;
            Ok(field)
        })?;
        self.field = Some(field.clone());
        Ok(field)
    }

    fn solve(&mut self) -> Result<(), CliError> {
        let gs = self.couplings()?;
        let field = self.synthesize()?;
        let grid = self.field_grid();
        let cfg = self.cfg;
        let lattice = field.as_lattice().expect("synthesis returns a lattice");
        let max_s2 = lattice.values.iter().map(|v| v * v).fold(0.0, f64::max);
        self.out.stage("solve", &[("field", field.seed)], |out| {
            let mut records = vec![];
            for (i, &g) in gs.iter().enumerate() {
                let solver = match cfg.grid.n_t {
                    Some(n_t) => SolverGrid::new(grid.length, grid.n_x, cfg.grid.duration, n_t, cfg.grid.scheme)?,
                    None => SolverGrid::with_default_steps(grid.length, grid.n_x, cfg.grid.duration, g, max_s2, cfg.grid.scheme)?,
                };
                let sol = solve(&field, g, &solver, &SolveOptions::default())?;
                let profile_name = format!("profile_g{i}.csv");
                sol.write_profile_csv(out.file(&profile_name)?)?;
                let solution_name = match sol.to_lattice() {
                    Ok(lat) => {
                        let name = format!("solution_g{i}.psi");
                        write_lattice(out.file(&name)?, SOLUTION_MAGIC, &lat, field.seed)?;
                        Some(name)
                    }
                    Err(_) => None,
                };
                let log_e = sol.terminal_log_profile();
                let n = log_e.len() as f64;
                records.push(json!({
                    "g": g,
                    "scheme": solver.scheme,
                    "n_x": solver.n_x,
                    "n_t": solver.n_t,
                    "dt": solver.dt(),
                    "min_log_e": log_e.iter().cloned().fold(f64::INFINITY, f64::min),
                    "max_log_e": log_e.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    "mean_log_e": log_e.iter().sum::<f64>() / n,
                    "renormalizations": sol.renormalizations,
                    "profile": profile_name,
                    "solution": solution_name,
                }));
            }
            out.write_json("solve.json", &records)
        })
    }

    fn fk(&mut self) -> Result<(), CliError> {
        let gs = self.couplings()?;
        let cfg = self.cfg;
        let (modes_seed, paths_seed) = (self.seeds.modes, self.seeds.paths);
        let density = self.density.clone();
        self.out.stage("fk", &[("modes", modes_seed), ("paths", paths_seed)], |out| {
            let field = sample_modes(&density, cfg.grid.modes, modes_seed)?;
            let fk_cfg = FkConfig {
                duration: cfg.grid.duration,
                n_paths: cfg.fk.n_paths,
                n_steps: cfg.fk.n_steps,
                seed: paths_seed,
            };
            // Past 1/(2 mu) of the static path the estimator has no variance (or no mean),
            // so those rows are a heavy-tail picture rather than an estimate.
            let evaluator = CorrelationEvaluator::new(density.clone());
            let path = PiecewiseLinearPath::static_path(cfg.grid.duration);
            let mu = top_eigenvalue(&kernel_matrix(&evaluator, &path, cfg.grid.n_q)?);
            let threshold = 1.0 / (2.0 * mu);
            let mut records = vec![];
            for &x in &cfg.fk.x {
                for &g in &gs {
                    let est = fk_estimate_with_discretization(&field, g, x, &fk_cfg)?;
                    records.push(json!({ "estimate": est, "qualitative_only": g >= threshold }));
                }
            }
            out.write_json("fk.json", &json!({ "static_threshold": threshold, "records": records }))
        })
    }

    fn spectrum(&mut self) -> Result<(), CliError> {
        let gs = self.couplings()?;
        let cfg = self.cfg;
        let seed = self.seeds.amplification;
        let density = self.density.clone();
        let seeds: Vec<(&str, u64)> = if cfg.amplification.monte_carlo { vec![("amplification", seed)] } else { vec![] };
        self.out.stage("spectrum", &seeds, |out| {
            let evaluator = CorrelationEvaluator::new(density.clone());
            let path = PiecewiseLinearPath::static_path(cfg.grid.duration);
            let spec = eigen_spectrum(&kernel_matrix(&evaluator, &path, cfg.grid.n_q)?)?;
            spec.write_csv(out.file("spectrum.csv")?)?;
            let mut amps = vec![];
            for &g in &gs {
                amps.push(json!({
                    "g": g,
                    "product": path_amplification(&spec, g)?,
                    "bound": amplification_bound(&spec, g),
                }));
            }
            let mc = if cfg.amplification.monte_carlo {
                let mc_cfg = McAmplificationConfig {
                    n_realizations: cfg.amplification.n_realizations,
                    modes: cfg.grid.modes,
                    action_nodes: cfg.amplification.action_nodes,
                    n_q: cfg.grid.n_q,
                    seed,
                };
                Some(mc_validate_amplification(&density, &path, &gs, &mc_cfg)?)
            } else {
                None
            };
            out.write_json(
                "spectrum.json",
                &json!({
                    "path": path.id(),
                    "n_q": spec.n_q,
                    "duration": spec.duration,
                    "mu1": spec.mu1(),
                    "trace": spec.trace(),
                    "trace_target": density.correlation(0.0, 0.0) * spec.duration,
                    "leading": &spec.eigenvalues[..spec.eigenvalues.len().min(10)],
                    "amplification": amps,
                    "monte_carlo": mc,
                }),
            )
        })
    }

    fn gc(&mut self) -> Result<f64, CliError> {
        if let Some(g) = self.g_c {
            return Ok(g);
        }
        let cfg = self.cfg;
        let seed = self.seeds.optimizer;
        let density = self.density.clone();
        let g_c = self.out.stage("gc", &[("optimizer", seed)], |out| {
            let evaluator = CorrelationEvaluator::new(density);
            let opt = OptimizerConfig {
                n_p: cfg.grid.n_p,
                random_starts: cfg.optimizer.random_starts,
                max_iters: cfg.optimizer.max_iters,
                n_q_search: cfg.optimizer.n_q_search,
                n_q_final: cfg.grid.n_q,
                start_scale: cfg.optimizer.start_scale,
                simplex_step: cfg.optimizer.simplex_step,
                seed,
            };
            let best = maximize_mu1(&evaluator, cfg.grid.duration, &opt)?;
            let cc = critical_coupling(best.mu_max)?;
            best.path.write_csv(out.file("gc_path.csv")?)?;
            out.write_json(
                "gc.json",
                &json!({
                    "g_c": cc.g_c,
                    "upper_bound_estimate": cc.upper_bound_estimate,
                    "lower_bound": 1.0 / (2.0 * cfg.grid.duration),
                    "mu_max": best.mu_max,
                    "spread": best.spread,
                    "best_start": best.best_start,
                    "stagnated": best.stagnated,
                    "n_q": cfg.grid.n_q,
                    "n_p": cfg.grid.n_p,
                    "starts": best.trace.len(),
                    "trace": best.trace,
                }),
            )?;
            Ok(cc.g_c)
        })?;
        self.g_c = Some(g_c);
        Ok(g_c)
    }

    fn extremes(&mut self) -> Result<(), CliError> {
        let gs = self.couplings()?;
        let cfg = self.cfg;
        let seed = self.seeds.extremes;
        let density = self.density.clone();
        self.out.stage("extremes", &[("lattice", seed)], |out| {
            let t = cfg.grid.duration;
            write_density_csv(out.file("density.csv")?, t, 5.0 * t.sqrt(), cfg.extremes.density_points)?;
            let law = tail_constant(t, &density.lambda_matrix())?;
            let mut bounds = vec![];
            for &g in gs.iter().filter(|&&g| g > 0.0) {
                for eps in [1.0 / (4.0 * g * t), 1.0 / (2.0 * g * t)] {
                    bounds.push(json!({ "g": g, "epsilon": eps, "bound": epsilon_moment_bound(g, t, &law, eps)? }));
                }
            }
            let mc_cfg = ExtremesMcConfig {
                r: cfg.extremes.r,
                duration: t,
                n_realizations: cfg.extremes.n_realizations,
                spacing: cfg.extremes.spacing,
                levels: cfg.extremes.levels,
                window: cfg.extremes.window,
                seed,
            };
            let rows = mc_field_max_tail(&density, &mc_cfg)?;
            write_exceedance_csv(out.file("exceedance.csv")?, &rows)?;
            out.write_json(
                "extremes.json",
                &json!({
                    "duration": t,
                    "crossover_radius": crossover_radius(t),
                    "mean_r": mean_r(t)?,
                    "tail_law": law,
                    "epsilon_bounds": bounds,
                    "exceedance": rows,
                }),
            )
        })
    }

    fn poisson_check(&mut self) -> Result<(), CliError> {
        let cfg = self.cfg;
        let mut failed = vec![];
        self.out.stage("poisson-check", &[], |out| {
            let tol = cfg.poisson.tolerance;
            let mut pairs = vec![];
            for &a in &cfg.poisson.a {
                let p = poisson_pair_check(a)?;
                if !(p.discrepancy <= tol) {
                    failed.push(format!("poisson pair a={a}: discrepancy {:.3e} > {tol:.1e}", p.discrepancy));
                }
                pairs.push(p);
            }
            let t = cfg.grid.duration;
            let mut worst: f64 = 0.0;
            for i in 0..30 {
                let r = t.sqrt() * (0.2 + 4.8 * i as f64 / 29.0);
                let (a, b) = (p_r_theta(r, t), p_r_poisson(r, t));
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
            if !(worst <= tol) {
                failed.push(format!("theta and Poisson forms differ by {worst:.3e}"));
            }
            out.write_json(
                "poisson.json",
                &json!({ "pairs": pairs, "series_agreement": worst, "tolerance": tol }),
            )
        })?;
        self.failed.extend(failed);
        Ok(())
    }

    fn scan(&mut self) -> Result<(), CliError> {
        let gs = self.couplings()?;
        let cfg = self.cfg;
        let seed = self.seeds.scan;
        let g_c = self.g_c;
        let density = self.density.clone();
        self.out.stage("scan", &[("lattice", seed)], |out| {
            let (lx, lt) = density.correlation_lengths();
            let sc = &cfg.scan;
            let scan_cfg = ScanConfig {
                duration: cfg.grid.duration,
                couplings: gs.clone(),
                lengths: sc
                    .lengths
                    .clone()
                    .unwrap_or_else(|| ScanConfig::geometric_lengths(8.0 * lx, sc.l_max * lx)),
                realizations: sc.realizations,
                dx: lx / 8.0,
                field_dt: cfg.grid.field_dt.unwrap_or(lt / 16.0),
                solver_steps: cfg.grid.n_t,
                margin: sc.margin,
                phi: Phi::Power { exponent: sc.phi_exponent },
                thresholds: Thresholds { theta1: sc.theta1, theta2: sc.theta2, theta3: sc.theta3 },
                epsilons: sc.epsilons.clone(),
                seed,
            };
            let reports = intermittency_scan(&density, &scan_cfg)?;
            let mut summary = vec![];
            for (k, rep) in reports.iter().enumerate() {
                let mut decisions = vec![];
                for (i, r) in rep.realizations.iter().enumerate() {
                    let name = format!("curves/g{k}_r{i:03}.csv");
                    rep.write_curve_csv(out.file(&name)?, i)?;
                    decisions.push(json!({
                        "index": r.index,
                        "seed": r.seed,
                        "decision": r.decision,
                        "epsilon_averages": r.epsilon_averages,
                        "curve": name,
                    }));
                }
                summary.push(json!({
                    "g": rep.g,
                    "g_over_gc": g_c.map(|c| rep.g / c),
                    "subcritical_fraction": rep.subcritical_fraction,
                    "supercritical_fraction": rep.supercritical_fraction,
                    "inconclusive_fraction": rep.inconclusive_fraction,
                    "median_rho": rep.median_rho,
                    "median_phi": rep.median_phi,
                    "realizations": decisions,
                }));
            }
            out.write_json(
                "scan.json",
                &json!({
                    "config": scan_cfg,
                    "note": "f(L) uses the infimum over [L, L_max] only, so it is biased high near L_max",
                    "couplings": summary,
                }),
            )
        })
    }

    fn iid_demo(&mut self) -> Result<(), CliError> {
        let cfg = self.cfg;
        let seeds: Vec<(String, u64)> =
            (0..cfg.iid.alphas.len()).map(|k| (format!("alpha{k}"), Seeds::iid(cfg.seed, k))).collect();
        let seed_refs: Vec<(&str, u64)> = seeds.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        self.out.stage("iid-demo", &seed_refs, |out| {
            let mut reports = vec![];
            for (k, &alpha) in cfg.iid.alphas.iter().enumerate() {
                reports.push(iid_regime_demo(alpha, &cfg.iid.n, cfg.iid.repetitions, Seeds::iid(cfg.seed, k))?);
            }
            out.write_json("iid.json", &reports)
        })
    }
}
