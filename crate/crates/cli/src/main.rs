//! Batch front-end: reads a scenario, runs one experiment, writes CSVs and a manifest.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use rbdsde::bdsde::{self, PenaltyMode};
use rbdsde::doss::{solve_flow, XSamples};
use rbdsde::field::{
    b_measurability_probe, build_field, deterministic_pde_residual, doss_consistency,
    obstacle_gap_report,
};
use rbdsde::fixpoint::{
    comparison_check, comparison_scan, picard_solve, NormWeights, PicardOptions,
};
use rbdsde::geometry::{Domain, Shape};
use rbdsde::noise::sample_bundle;
use rbdsde::reflected_sde::{simulate_ensemble, simulate_reflected, EnsembleSpec, PathEnsemble};
use rbdsde::scenario::{Scenario, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] rbdsde::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Io { .. } => 2,
            _ => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "rbdsde",
    version,
    about = "Reflected backward doubly stochastic SDE experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario configuration (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the seed of the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (all results are independent of this).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, env = "RBDSDE_OUT")]
    out: Option<PathBuf>,
    /// Overrides the number of forward paths.
    #[arg(long)]
    n_paths: Option<usize>,
    /// Overrides the number of time steps.
    #[arg(long)]
    n_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Explicit,
    Implicit,
    Auto,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate reflected forward paths and dump them with their local time.
    SimulateX {
        #[command(flatten)]
        common: Common,
        /// Number of paths to dump.
        #[arg(long, default_value_t = 5)]
        paths: usize,
    },
    /// Solve the backward equation conditioned on one backward path.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        b_stream: u64,
    },
    /// Penalized solutions for a list of penalty strengths, against the direct scheme.
    PenalizeSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "4,16,64,256")]
        n: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Implicit)]
        mode: Mode,
    },
    /// Picard iteration for a noise coefficient that depends on z.
    Picard {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha_prime: Option<f64>,
        #[arg(long, default_value_t = 20)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Ordering of the solutions for the scenario and its shift by delta in l and f.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Compares the inverse flow of the field with the transformed problem.
    DossCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Solution field on the configured space-time layout.
    Field {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        b_stream: u64,
    },
    /// Residuals of the deterministic obstacle problem on the field (g = 0 only).
    Residuals {
        #[command(flatten)]
        common: Common,
    },
    /// Variance decomposition of u(t, x) across and within backward paths.
    ProbeB {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        replicas: usize,
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
        path_counts: Vec<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SimulateX { .. } => "simulate-x",
            Command::Solve { .. } => "solve",
            Command::PenalizeSweep { .. } => "penalize-sweep",
            Command::Picard { .. } => "picard",
            Command::Compare { .. } => "compare",
            Command::DossCheck { .. } => "doss-check",
            Command::Field { .. } => "field",
            Command::Residuals { .. } => "residuals",
            Command::ProbeB { .. } => "probe-b",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SimulateX { common, .. }
            | Command::Solve { common, .. }
            | Command::PenalizeSweep { common, .. }
            | Command::Picard { common, .. }
            | Command::Compare { common, .. }
            | Command::DossCheck { common }
            | Command::Field { common, .. }
            | Command::Residuals { common }
            | Command::ProbeB { common, .. } => common,
        }
    }
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    config: &'a ScenarioConfig,
    config_sha256: String,
    seed: u64,
    workers: usize,
    wall_time_s: f64,
    files: Vec<FileEntry>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> CliResult<Self> {
        fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Artifacts {
            dir,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|source| CliError::Io { path, source })?;
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> rbdsde::Result<()>,
    ) -> CliResult<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, buf)
    }
}

fn load_config(common: &Common) -> CliResult<ScenarioConfig> {
    let text = fs::read_to_string(&common.scenario).map_err(|source| CliError::Io {
        path: common.scenario.clone(),
        source,
    })?;
    let mut config: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", common.scenario.display())))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = common.n_paths {
        config.n_paths = n;
    }
    if let Some(n) = common.n_steps {
        config.grid.n_steps = n;
    }
    Ok(config)
}

fn ensemble(sc: &Scenario, b_stream: u64) -> CliResult<PathEnsemble> {
    let p = &sc.problem;
    let b = p.backward_path(sc.config.seed, b_stream)?;
    let spec = EnsembleSpec {
        n_paths: sc.config.n_paths,
        seed: sc.config.seed,
        first_stream: 0,
    };
    Ok(simulate_ensemble(
        &p.domain,
        &p.sde,
        &p.grid,
        sc.start_t,
        &sc.start_x,
        spec,
        &b,
        b_stream,
    )?)
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Tabulation axes for an x-dependent flow: the bounding box of the domain.
fn flow_axes(domain: &Domain, n: usize) -> Vec<Vec<f64>> {
    let half: Vec<f64> = match domain.shape() {
        Shape::Ball { radius, .. } => vec![*radius; domain.dim()],
        Shape::Ellipsoid { semi_axes, .. } => semi_axes.clone(),
    };
    domain
        .center()
        .iter()
        .zip(&half)
        .map(|(c, h)| {
            (0..n)
                .map(|k| c - h + 2.0 * h * k as f64 / (n - 1) as f64)
                .collect()
        })
        .collect()
}

fn run(cmd: &Command, sc: &Scenario, art: &mut Artifacts) -> CliResult<()> {
    let p = &sc.problem;
    let cfg = &sc.config;
    let opts = &cfg.solver;
    match cmd {
        Command::SimulateX { paths, .. } => {
            let mut summary = String::from("path,a_terminal,boundary_steps\n");
            for k in 0..*paths {
                let bundle =
                    sample_bundle(&p.grid, p.domain.dim(), p.coeffs.ell(), cfg.seed, k as u64)?;
                let path = simulate_reflected(&p.domain, &p.sde, sc.start_t, &sc.start_x, &bundle)?;
                art.csv(&format!("path_{k}.csv"), |w| path.write_csv(w))?;
                let exits = path.exited.iter().filter(|&&e| e).count();
                summary.push_str(&format!("{k},{},{exits}\n", fmt(path.a_terminal())));
                if k == 0 {
                    art.csv("b_increments.bin", |w| bundle.write_binary(w))?;
                }
            }
            art.write("summary.csv", summary.into_bytes())?;
            println!("simulated {paths} reflected paths");
        }
        Command::Solve { b_stream, .. } => {
            let ens = ensemble(sc, *b_stream)?;
            let sol = bdsde::solve(&p.coeffs, &ens, sc.scheme, opts)?;
            art.csv("solution.csv", |w| {
                sol.write_summary_csv(&ens, &p.coeffs, w)
            })?;
            println!("scheme {}", sc.scheme.label());
            println!(
                "Y_0 = {:.6} (se {:.2e})",
                sol.start_value(),
                sol.start_standard_error()
            );
            if let Some(exact) = &sc.exact {
                let u = exact(sc.start_t, &sc.start_x);
                println!(
                    "closed form {u:.6}, |error| {:.2e}",
                    (sol.start_value() - u).abs()
                );
            }
        }
        Command::PenalizeSweep { n, mode, .. } => {
            if p.coeffs.obstacle.is_none() {
                return Err(rbdsde::Error::MissingObstacle.into());
            }
            let mode = match mode {
                Mode::Explicit => PenaltyMode::Explicit,
                Mode::Implicit => PenaltyMode::Implicit,
                Mode::Auto => PenaltyMode::Auto,
            };
            let ens = ensemble(sc, 0)?;
            let direct = bdsde::solve_reflected_direct(&p.coeffs, &ens, opts)?;
            let mut csv = String::from("n,mean_y0,se_y0,sup_distance_direct,skorokhod\n");
            println!(
                "direct: Y_0 = {:.6} (se {:.2e})",
                direct.start_value(),
                direct.start_standard_error()
            );
            for &ni in n {
                let s = bdsde::solve_penalized(&p.coeffs, ni, mode, &ens, opts)?;
                let dist = bdsde::sup_distance(&s, &direct)?;
                let sk = bdsde::skorokhod_residual(&s, &ens, &p.coeffs)?;
                csv.push_str(&format!(
                    "{ni},{},{},{},{}\n",
                    fmt(s.start_value()),
                    fmt(s.start_standard_error()),
                    fmt(dist),
                    fmt(sk)
                ));
                println!(
                    "n = {ni}: Y_0 = {:.6}, sup |Y^n - Y| = {dist:.3e}, skorokhod {sk:.2e}",
                    s.start_value()
                );
            }
            art.write("penalize_sweep.csv", csv.into_bytes())?;
        }
        Command::Picard {
            alpha_prime,
            max_iter,
            tol,
            ..
        } => {
            let ens = ensemble(sc, 0)?;
            let weights = NormWeights::from_constants(&p.coeffs.constants, *alpha_prime)?;
            let picard = PicardOptions {
                tol: *tol,
                max_iter: *max_iter,
                ..PicardOptions::default()
            };
            let (sol, rep) = picard_solve(&p.coeffs, &ens, opts, &weights, &picard)?;
            let mut csv = String::from("iteration,distance,ratio\n");
            for (k, d) in rep.distances.iter().enumerate() {
                let ratio = if k == 0 {
                    String::new()
                } else {
                    rep.ratios.get(k - 1).map_or(String::new(), |r| fmt(*r))
                };
                csv.push_str(&format!("{},{},{ratio}\n", k + 1, fmt(*d)));
            }
            art.write("picard.csv", csv.into_bytes())?;
            art.csv("solution.csv", |w| {
                sol.write_summary_csv(&ens, &p.coeffs, w)
            })?;
            println!("== picard ==");
            println!("iterations {} converged {}", rep.iterations, rep.converged);
            println!("predicted ratio {:.4}", rep.predicted_ratio);
            for (k, r) in rep.ratios.iter().enumerate() {
                println!("ratio {}: {r:.4}", k + 1);
            }
            println!("Y_0 = {:.6}", sol.start_value());
            if !rep.converged {
                return Err(CliError::Numeric(format!(
                    "no convergence to {tol:e} within {} iterations (last distance {:e})",
                    rep.iterations,
                    rep.distances.last().copied().unwrap_or(f64::NAN)
                )));
            }
        }
        Command::Compare { delta, .. } => {
            let ens = ensemble(sc, 0)?;
            let upper = sc.shifted_coefficients(*delta);
            let (lower, upper) = if *delta >= 0.0 {
                (&p.coeffs, &upper)
            } else {
                (&upper, &p.coeffs)
            };
            let rep = if p.coeffs.obstacle.is_none() {
                comparison_check(lower, upper, &ens, opts)?
            } else {
                comparison_scan(lower, upper, &ens, sc.scheme, opts)?
            };
            let mut csv = String::from("node,time,violations\n");
            for (i, v) in rep.violations.iter().enumerate() {
                csv.push_str(&format!("{i},{},{v}\n", fmt(p.grid.time(i))));
            }
            art.write("comparison.csv", csv.into_bytes())?;
            println!("== comparison ==");
            println!(
                "violations {} (threshold {:.3e})",
                rep.total_violations, rep.threshold
            );
            println!("max Y_lower - Y_upper {:.3e}", rep.worst);
        }
        Command::DossCheck { .. } => {
            let layout = sc.field_layout()?;
            let streams: Vec<u64> = (0..cfg.n_b_scenarios as u64).collect();
            let axes = flow_axes(&p.domain, cfg.flow.n_x);
            let ens = EnsembleSpec {
                n_paths: cfg.n_paths,
                seed: cfg.seed,
                first_stream: 0,
            };
            let rep = doss_consistency(
                p,
                &layout,
                sc.scheme,
                opts,
                ens,
                &streams,
                XSamples::Grid(axes.clone()),
                &cfg.flow.y_samples(),
            )?;
            let b = p.backward_path(cfg.seed, 0)?;
            let flow = solve_flow(
                p.coeffs.noise.as_ref(),
                &p.grid,
                &b,
                p.domain.dim(),
                XSamples::Grid(axes),
                cfg.flow.y_samples(),
                0,
            )?;
            art.csv("flow.csv", |w| flow.write_csv(w))?;
            let mut csv = String::from("b_stream,sup_diff,tolerance\n");
            for s in &rep.scenarios {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    s.b_stream,
                    fmt(s.sup_diff),
                    fmt(s.tolerance)
                ));
                println!(
                    "B{}: sup |eps(u) - v| = {:.3e}, tolerance {:.3e}",
                    s.b_stream, s.sup_diff, s.tolerance
                );
            }
            art.write("doss_check.csv", csv.into_bytes())?;
            println!("within 2 x tolerance: {}", rep.within(2.0));
        }
        Command::Field { b_stream, .. } => {
            let layout = sc.field_layout()?;
            let ens = EnsembleSpec {
                n_paths: cfg.n_paths,
                seed: cfg.seed,
                first_stream: 0,
            };
            let flow = if p.coeffs.noise.is_zero() {
                None
            } else {
                let b = p.backward_path(cfg.seed, *b_stream)?;
                Some(solve_flow(
                    p.coeffs.noise.as_ref(),
                    &p.grid,
                    &b,
                    p.domain.dim(),
                    XSamples::Grid(flow_axes(&p.domain, cfg.flow.n_x)),
                    cfg.flow.y_samples(),
                    *b_stream,
                )?)
            };
            let field = build_field(p, &layout, sc.scheme, opts, ens, *b_stream, flow.as_ref())?;
            art.csv("field.csv", |w| field.write_csv(w))?;
            println!(
                "{} points, max tolerance {:.3e}",
                field.n_points(),
                field.max_tolerance()
            );
            if p.coeffs.obstacle.is_some() {
                let gap = obstacle_gap_report(&field)?;
                println!(
                    "obstacle gap: min {:.3e}, mean {:.3e}, violations {} (worst {:.3e})",
                    gap.min_gap, gap.mean_gap, gap.violations, gap.worst_violation
                );
            }
        }
        Command::Residuals { .. } => {
            let layout = sc.field_layout()?;
            let ens = EnsembleSpec {
                n_paths: cfg.n_paths,
                seed: cfg.seed,
                first_stream: 0,
            };
            let field = build_field(p, &layout, sc.scheme, opts, ens, 0, None)?;
            let rep = deterministic_pde_residual(&field, p)?;
            art.csv("field.csv", |w| field.write_csv(w))?;
            art.csv("residuals.csv", |w| rep.write_csv(w))?;
            println!("== residuals ==");
            println!(
                "interior sup {:.3e} rms {:.3e}",
                rep.interior_sup, rep.interior_rms
            );
            println!(
                "boundary sup {:.3e} rms {:.3e}",
                rep.boundary_sup, rep.boundary_rms
            );
        }
        Command::ProbeB {
            replicas,
            path_counts,
            ..
        } => {
            let rep = b_measurability_probe(
                p,
                sc.start_node(),
                &sc.start_x,
                cfg.n_b_scenarios,
                *replicas,
                path_counts,
                cfg.seed,
                sc.scheme,
                opts,
            )?;
            let mut csv = String::from("n_paths,mean,across_b_variance,within_b_variance\n");
            for r in &rep.rows {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.n_paths,
                    fmt(r.mean),
                    fmt(r.across_b_variance),
                    fmt(r.within_b_variance)
                ));
                println!(
                    "n_paths {}: mean {:.5}, across-B var {:.3e}, within-B var {:.3e}",
                    r.n_paths, r.mean, r.across_b_variance, r.within_b_variance
                );
            }
            art.write("probe_b.csv", csv.into_bytes())?;
            if let Some(s) = rep.within_slope {
                println!("within-B variance slope vs n_paths {s:.3}");
            }
        }
    }
    Ok(())
}

fn execute(cmd: &Command) -> CliResult<()> {
    let started = Instant::now();
    let common = cmd.common();
    let mut config = load_config(common)?;
    let out = common
        .out
        .clone()
        .or_else(|| config.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("rbdsde-out"));
    // the output location is not part of the experiment
    config.out = None;
    let workers = common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(CliError::Validation("--workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let sc = Scenario::from_config(config)?;
    let mut art = Artifacts::new(out)?;
    log::info!(
        "{} on `{}` with seed {}",
        cmd.name(),
        sc.config.builtin,
        sc.config.seed
    );
    run(cmd, &sc, &mut art)?;

    let canonical = serde_json::to_vec(&sc.config).expect("config serializes");
    let manifest = Manifest {
        subcommand: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        config: &sc.config,
        config_sha256: hex::encode(Sha256::digest(&canonical)),
        seed: sc.config.seed,
        workers,
        wall_time_s: started.elapsed().as_secs_f64(),
        files: std::mem::take(&mut art.files),
    };
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let path = art.dir.join("manifest.json");
    fs::write(&path, text).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    println!("wrote {}", art.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
