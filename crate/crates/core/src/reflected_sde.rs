//! Normally reflected diffusions with boundary local time, simulated by an
//! Euler step followed by projection onto the closed domain.
//!
//! The displacement of each projection is the local-time increment, so `A`
//! increases only on steps whose Euler predictor left the domain. Before the
//! starting node the path is frozen at the starting point with `A = 0`.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::noise::{Channel, Increments, PathBundle, TimeGrid};

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Drift `b: R^d -> R^d` and diffusion `sigma: R^d -> R^{d x d}` (row-major).
#[derive(Clone)]
pub struct SdeSpec {
    dim: usize,
    drift: VectorField,
    diffusion: VectorField,
    lipschitz_k: f64,
}

impl std::fmt::Debug for SdeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeSpec")
            .field("dim", &self.dim)
            .field("lipschitz_k", &self.lipschitz_k)
            .finish()
    }
}

impl SdeSpec {
    pub fn new(
        dim: usize,
        drift: VectorField,
        diffusion: VectorField,
        lipschitz_k: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension(
                "state dimension must be at least 1".into(),
            ));
        }
        if !(lipschitz_k > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Lipschitz constant must be positive, got {lipschitz_k}"
            )));
        }
        Ok(SdeSpec {
            dim,
            drift,
            diffusion,
            lipschitz_k,
        })
    }

    /// Constant drift vector and constant `d x d` diffusion matrix.
    pub fn constant(drift: Vec<f64>, diffusion: Vec<f64>) -> Result<Self> {
        let d = drift.len();
        if diffusion.len() != d * d {
            return Err(Error::Dimension(format!(
                "diffusion has {} entries, expected {}",
                diffusion.len(),
                d * d
            )));
        }
        SdeSpec::new(
            d,
            Arc::new(move |_, out| out.copy_from_slice(&drift)),
            Arc::new(move |_, out| out.copy_from_slice(&diffusion)),
            1.0,
        )
    }

    /// `scale * W` in `d` dimensions.
    pub fn brownian(d: usize, scale: f64) -> Result<Self> {
        let mut sigma = vec![0.0; d * d];
        for i in 0..d {
            sigma[i * d + i] = scale;
        }
        SdeSpec::constant(vec![0.0; d], sigma)
    }

    /// One-dimensional geometric Brownian motion `dX = r X dt + s X dW`.
    pub fn geometric(rate: f64, vol: f64) -> Result<Self> {
        SdeSpec::new(
            1,
            Arc::new(move |x, out| out[0] = rate * x[0]),
            Arc::new(move |x, out| out[0] = vol * x[0]),
            rate.abs().max(vol.abs()).max(f64::MIN_POSITIVE),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz_k(&self) -> f64 {
        self.lipschitz_k
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }
}

/// Scratch buffers for [`euler_projection_step`].
pub struct StepScratch {
    b: Vec<f64>,
    s: Vec<f64>,
}

impl StepScratch {
    pub fn new(d: usize) -> Self {
        StepScratch {
            b: vec![0.0; d],
            s: vec![0.0; d * d],
        }
    }
}

/// Advances `x` by one Euler step and projects it back onto the closure.
/// Returns the local-time increment and whether the predictor had left the domain.
pub fn euler_projection_step(
    domain: &Domain,
    spec: &SdeSpec,
    x: &mut [f64],
    dw: &[f64],
    dt: f64,
    scratch: &mut StepScratch,
) -> (f64, bool) {
    let d = x.len();
    spec.drift(x, &mut scratch.b);
    spec.diffusion(x, &mut scratch.s);
    for i in 0..d {
        let noise: f64 = (0..d).map(|j| scratch.s[i * d + j] * dw[j]).sum();
        scratch.b[i] = x[i] + scratch.b[i] * dt + noise;
    }
    x.copy_from_slice(&scratch.b);
    if domain.psi(x) < 0.0 {
        (domain.project_in_place(x), true)
    } else {
        (0.0, false)
    }
}

fn check_start(
    domain: &Domain,
    spec: &SdeSpec,
    grid: &TimeGrid,
    t: f64,
    x: &[f64],
) -> Result<usize> {
    if x.len() != domain.dim() || spec.dim() != domain.dim() {
        return Err(Error::Dimension(format!(
            "start point has {} coordinates, domain {}, dynamics {}",
            x.len(),
            domain.dim(),
            spec.dim()
        )));
    }
    let psi = domain.psi(x);
    if psi < -domain.boundary_tol() || !psi.is_finite() {
        return Err(Error::StartOutsideDomain { psi });
    }
    grid.node_of(t).ok_or(Error::StartNotOnGrid(t))
}

#[derive(Clone, Debug)]
pub struct ReflectedPath {
    pub grid: TimeGrid,
    pub start_node: usize,
    /// `(N + 1) x d`, row-major.
    pub x: Vec<f64>,
    /// Local time at every node, `A_0 = 0`.
    pub a: Vec<f64>,
    /// Whether the Euler predictor of step `i` left the domain.
    pub exited: Vec<bool>,
    dim: usize,
}

impl ReflectedPath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x_at(&self, node: usize) -> &[f64] {
        &self.x[node * self.dim..(node + 1) * self.dim]
    }

    pub fn a_terminal(&self) -> f64 {
        self.a[self.a.len() - 1]
    }

    /// Columns `step, time, x_1..x_d, A`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let xs: Vec<String> = (1..=self.dim).map(|k| format!("x_{k}")).collect();
        writeln!(out, "step,time,{},A", xs.join(","))?;
        for i in 0..self.a.len() {
            let row: Vec<String> = self.x_at(i).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(
                out,
                "{i},{:.17e},{},{:.17e}",
                self.grid.time(i),
                row.join(","),
                self.a[i]
            )?;
        }
        Ok(())
    }
}

/// Simulates `X^{t,x}` and its local time on the bundle's grid using its forward increments.
pub fn simulate_reflected(
    domain: &Domain,
    spec: &SdeSpec,
    t: f64,
    x0: &[f64],
    bundle: &PathBundle,
) -> Result<ReflectedPath> {
    let grid = bundle.grid;
    let start_node = check_start(domain, spec, &grid, t, x0)?;
    if bundle.d() != domain.dim() {
        return Err(Error::Dimension(format!(
            "W has dimension {}, domain {}",
            bundle.d(),
            domain.dim()
        )));
    }
    let n = grid.n_steps();
    let d = domain.dim();
    let dt = grid.dt();
    let mut x = Vec::with_capacity((n + 1) * d);
    let mut a = vec![0.0; n + 1];
    let mut exited = vec![false; n];
    for _ in 0..=start_node {
        x.extend_from_slice(x0);
    }
    let mut cur = x0.to_vec();
    let mut scratch = StepScratch::new(d);
    for i in start_node..n {
        let (da, out) =
            euler_projection_step(domain, spec, &mut cur, bundle.w.row(i), dt, &mut scratch);
        exited[i] = out;
        a[i + 1] = a[i] + da;
        x.extend_from_slice(&cur);
    }
    Ok(ReflectedPath {
        grid,
        start_node,
        x,
        a,
        exited,
        dim: d,
    })
}

/// Which forward streams an ensemble draws: path `p` uses stream `first_stream + p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub n_paths: usize,
    pub seed: u64,
    pub first_stream: u64,
}

/// Many reflected paths from one starting point, sharing one backward path `B`.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub start_node: usize,
    pub spec: EnsembleSpec,
    d: usize,
    x: Vec<f64>,
    a: Vec<f64>,
    dw: Vec<f64>,
    pub b: Increments,
    pub b_stream: u64,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.spec.n_paths
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ell(&self) -> usize {
        self.b.dim()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn x(&self, path: usize, node: usize) -> &[f64] {
        let n1 = self.n_steps() + 1;
        let o = (path * n1 + node) * self.d;
        &self.x[o..o + self.d]
    }

    pub fn a(&self, path: usize, node: usize) -> f64 {
        self.a[path * (self.n_steps() + 1) + node]
    }

    /// `A_{i+1} - A_i`.
    pub fn da(&self, path: usize, step: usize) -> f64 {
        self.a(path, step + 1) - self.a(path, step)
    }

    pub fn dw(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps() + step) * self.d;
        &self.dw[o..o + self.d]
    }

    pub fn db(&self, step: usize) -> &[f64] {
        self.b.row(step)
    }
}

/// Simulates an ensemble from `(t, x0)`; path `p` draws forward stream
/// `spec.first_stream + p`, every path shares the backward increments `b`.
pub fn simulate_ensemble(
    domain: &Domain,
    sde: &SdeSpec,
    grid: &TimeGrid,
    t: f64,
    x0: &[f64],
    spec: EnsembleSpec,
    b: &Increments,
    b_stream: u64,
) -> Result<PathEnsemble> {
    let start_node = check_start(domain, sde, grid, t, x0)?;
    if b.n_steps() != grid.n_steps() {
        return Err(Error::Dimension(format!(
            "B has {} steps, grid {}",
            b.n_steps(),
            grid.n_steps()
        )));
    }
    if spec.n_paths == 0 {
        return Err(Error::InvalidParameter(
            "an ensemble needs at least one path".into(),
        ));
    }
    let n = grid.n_steps();
    let d = domain.dim();
    let dt = grid.dt();
    let mut x = vec![0.0; spec.n_paths * (n + 1) * d];
    let mut a = vec![0.0; spec.n_paths * (n + 1)];
    let mut dw = vec![0.0; spec.n_paths * n * d];
    x.par_chunks_mut((n + 1) * d)
        .zip(a.par_chunks_mut(n + 1))
        .zip(dw.par_chunks_mut(n * d))
        .enumerate()
        .try_for_each(|(p, ((xp, ap), dwp))| -> Result<()> {
            let w = Increments::sample(
                grid,
                d,
                spec.seed,
                Channel::Forward,
                spec.first_stream + p as u64,
            )?;
            dwp.copy_from_slice(w.as_slice());
            for node in 0..=start_node {
                xp[node * d..(node + 1) * d].copy_from_slice(x0);
            }
            let mut cur = x0.to_vec();
            let mut scratch = StepScratch::new(d);
            for i in start_node..n {
                let (da, _) =
                    euler_projection_step(domain, sde, &mut cur, w.row(i), dt, &mut scratch);
                ap[i + 1] = ap[i] + da;
                xp[(i + 1) * d..(i + 2) * d].copy_from_slice(&cur);
            }
            Ok(())
        })?;
    Ok(PathEnsemble {
        grid: *grid,
        start_node,
        spec,
        d,
        x,
        a,
        dw,
        b: b.clone(),
        b_stream,
    })
}

/// Terminal state and local time of each path, without storing trajectories.
pub fn terminal_samples(
    domain: &Domain,
    sde: &SdeSpec,
    grid: &TimeGrid,
    t: f64,
    x0: &[f64],
    spec: EnsembleSpec,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let start_node = check_start(domain, sde, grid, t, x0)?;
    let d = domain.dim();
    let dt = grid.dt();
    (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let w = Increments::sample(
                grid,
                d,
                spec.seed,
                Channel::Forward,
                spec.first_stream + p as u64,
            )?;
            let mut cur = x0.to_vec();
            let mut scratch = StepScratch::new(d);
            let mut a = 0.0;
            for i in start_node..grid.n_steps() {
                a += euler_projection_step(domain, sde, &mut cur, w.row(i), dt, &mut scratch).0;
            }
            Ok((cur, a))
        })
        .collect()
}

/// A pair of starting points driven by the same forward increments.
#[derive(Clone, Debug, PartialEq)]
pub struct StartPair {
    pub t: f64,
    pub x: Vec<f64>,
    pub t2: f64,
    pub x2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentRow {
    pub pair: StartPair,
    pub dx: f64,
    pub dt: f64,
    /// `E sup_s |X^{t,x}_s - X^{t',x'}_s|^p` and its Monte Carlo standard error.
    pub x_moment: f64,
    pub x_moment_se: f64,
    /// `E sup_s |A^{t,x}_s - A^{t',x'}_s|^p` and its Monte Carlo standard error.
    pub a_moment: f64,
    pub a_moment_se: f64,
    /// `E exp(mu A_T^{t,x})`.
    pub exp_local_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub p: f64,
    pub rows: Vec<MomentRow>,
    /// Log-log slope of the X moment against `|x - x'|` over rows with `t = t'`.
    pub slope_dx: Option<f64>,
    /// Log-log slope of the X moment against `|t - t'|` over rows with `x = x'`.
    pub slope_dt: Option<f64>,
    /// Whether every `E exp(mu A_T)` estimate is finite.
    pub exp_moments_finite: bool,
}

/// Least-squares slope of `log y` against `log x`; `None` with fewer than two usable points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Empirical moments of the difference of two synchronously coupled reflected paths.
pub fn moment_scaling_report(
    domain: &Domain,
    sde: &SdeSpec,
    grid: &TimeGrid,
    pairs: &[StartPair],
    p: f64,
    mu: f64,
    spec: EnsembleSpec,
) -> Result<MomentReport> {
    if !(p > 4.0) {
        return Err(Error::InvalidParameter(format!(
            "moment exponent must exceed 4, got {p}"
        )));
    }
    let d = domain.dim();
    let dt = grid.dt();
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let n1 = check_start(domain, sde, grid, pair.t, &pair.x)?;
        let n2 = check_start(domain, sde, grid, pair.t2, &pair.x2)?;
        let samples: Vec<(f64, f64, f64)> = (0..spec.n_paths)
            .into_par_iter()
            .map(|path| {
                let w = Increments::sample(
                    grid,
                    d,
                    spec.seed,
                    Channel::Forward,
                    spec.first_stream + path as u64,
                )?;
                let (mut x1, mut x2) = (pair.x.clone(), pair.x2.clone());
                let (mut a1, mut a2) = (0.0, 0.0);
                let mut s1 = StepScratch::new(d);
                let mut s2 = StepScratch::new(d);
                let gap = |u: &[f64], v: &[f64]| {
                    u.iter()
                        .zip(v)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                };
                let mut sup_x = gap(&x1, &x2);
                let mut sup_a: f64 = 0.0;
                for i in 0..grid.n_steps() {
                    if i >= n1 {
                        a1 += euler_projection_step(domain, sde, &mut x1, w.row(i), dt, &mut s1).0;
                    }
                    if i >= n2 {
                        a2 += euler_projection_step(domain, sde, &mut x2, w.row(i), dt, &mut s2).0;
                    }
                    sup_x = sup_x.max(gap(&x1, &x2));
                    sup_a = sup_a.max((a1 - a2).abs());
                }
                Ok((sup_x.powf(p), sup_a.powf(p), (mu * a1).exp()))
            })
            .collect::<Result<_>>()?;
        let (xm, xse) = mean_se(&samples.iter().map(|s| s.0).collect::<Vec<_>>());
        let (am, ase) = mean_se(&samples.iter().map(|s| s.1).collect::<Vec<_>>());
        let (em, _) = mean_se(&samples.iter().map(|s| s.2).collect::<Vec<_>>());
        let dx = pair
            .x
            .iter()
            .zip(&pair.x2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        rows.push(MomentRow {
            pair: pair.clone(),
            dx,
            dt: (pair.t - pair.t2).abs(),
            x_moment: xm,
            x_moment_se: xse,
            a_moment: am,
            a_moment_se: ase,
            exp_local_time: em,
        });
    }
    let slope_dx = loglog_slope(
        &rows
            .iter()
            .filter(|r| r.dt == 0.0)
            .map(|r| (r.dx, r.x_moment))
            .collect::<Vec<_>>(),
    );
    let slope_dt = loglog_slope(
        &rows
            .iter()
            .filter(|r| r.dx == 0.0)
            .map(|r| (r.dt, r.x_moment))
            .collect::<Vec<_>>(),
    );
    let exp_moments_finite = rows.iter().all(|r| r.exp_local_time.is_finite());
    Ok(MomentReport {
        p,
        rows,
        slope_dx,
        slope_dt,
        exp_moments_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_bundle;

    fn unit_interval() -> Domain {
        Domain::interval(0.0, 1.0).unwrap()
    }

    #[test]
    fn still_dynamics_stay_put() {
        let dom = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let sde = SdeSpec::constant(vec![0.0, 0.0], vec![0.0; 4]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let bundle = sample_bundle(&grid, 2, 1, 1, 0).unwrap();
        let path = simulate_reflected(&dom, &sde, 0.0, &[0.2, -0.3], &bundle).unwrap();
        assert!(path.x.chunks(2).all(|x| x == [0.2, -0.3]));
        assert!(path.a.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn deterministic_skorokhod_problem() {
        // X reaches 0 at t = 0.1 and is pushed back at rate 5 afterwards
        let dom = unit_interval();
        let sde = SdeSpec::constant(vec![-5.0], vec![0.0]).unwrap();
        for n in [64, 256, 1000] {
            let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
            let bundle = sample_bundle(&grid, 1, 1, 1, 0).unwrap();
            let path = simulate_reflected(&dom, &sde, 0.0, &[0.5], &bundle).unwrap();
            assert!(
                (path.a_terminal() - 4.5).abs() <= 5.0 * grid.dt(),
                "n={n}: {}",
                path.a_terminal()
            );
            assert_eq!(path.x_at(n)[0], 0.0);
        }
    }

    #[test]
    fn frozen_before_start() {
        let dom = unit_interval();
        let sde = SdeSpec::brownian(1, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let bundle = sample_bundle(&grid, 1, 1, 3, 0).unwrap();
        let path = simulate_reflected(&dom, &sde, 0.25, &[0.4], &bundle).unwrap();
        assert_eq!(path.start_node, 5);
        for i in 0..=5 {
            assert_eq!(path.x_at(i), &[0.4]);
            assert_eq!(path.a[i], 0.0);
        }
        assert!(simulate_reflected(&dom, &sde, 0.23, &[0.4], &bundle).is_err());
        assert!(matches!(
            simulate_reflected(&dom, &sde, 0.0, &[1.5], &bundle),
            Err(Error::StartOutsideDomain { .. })
        ));
    }

    #[test]
    fn ensemble_matches_single_paths() {
        let dom = unit_interval();
        let sde = SdeSpec::brownian(1, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let b = Increments::sample(&grid, 1, 9, Channel::Backward, 4).unwrap();
        let spec = EnsembleSpec {
            n_paths: 5,
            seed: 9,
            first_stream: 0,
        };
        let ens = simulate_ensemble(&dom, &sde, &grid, 0.0, &[0.5], spec, &b, 4).unwrap();
        let terms = terminal_samples(&dom, &sde, &grid, 0.0, &[0.5], spec).unwrap();
        for p in 0..5 {
            let bundle = sample_bundle(&grid, 1, 1, 9, p as u64).unwrap();
            let path = simulate_reflected(&dom, &sde, 0.0, &[0.5], &bundle).unwrap();
            for i in 0..=32 {
                assert_eq!(ens.x(p, i), path.x_at(i));
                assert_eq!(ens.a(p, i), path.a[i]);
            }
            assert_eq!(ens.dw(p, 3), bundle.w.row(3));
            assert_eq!(terms[p].0, path.x_at(32));
            assert_eq!(terms[p].1, path.a_terminal());
        }
        assert_eq!(ens.db(7), b.row(7));
    }

    #[test]
    fn identical_pair_has_zero_moments() {
        let dom = unit_interval();
        let sde = SdeSpec::brownian(1, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let pair = StartPair {
            t: 0.0,
            x: vec![0.3],
            t2: 0.0,
            x2: vec![0.3],
        };
        let spec = EnsembleSpec {
            n_paths: 50,
            seed: 1,
            first_stream: 0,
        };
        let rep = moment_scaling_report(
            &dom,
            &sde,
            &grid,
            std::slice::from_ref(&pair),
            5.0,
            1.0,
            spec,
        )
        .unwrap();
        assert_eq!(rep.rows[0].x_moment, 0.0);
        assert_eq!(rep.rows[0].a_moment, 0.0);
        assert!(rep.exp_moments_finite);
        assert!(moment_scaling_report(&dom, &sde, &grid, &[pair], 4.0, 1.0, spec).is_err());
    }

    #[test]
    fn frozen_pairs_scale_with_exact_exponent() {
        let dom = unit_interval();
        let sde = SdeSpec::constant(vec![0.0], vec![0.0]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let pairs: Vec<StartPair> = (2..7)
            .map(|k| StartPair {
                t: 0.0,
                x: vec![0.1],
                t2: 0.0,
                x2: vec![0.1 + 0.5f64.powi(k)],
            })
            .collect();
        let spec = EnsembleSpec {
            n_paths: 4,
            seed: 1,
            first_stream: 0,
        };
        let rep = moment_scaling_report(&dom, &sde, &grid, &pairs, 5.0, 0.0, spec).unwrap();
        assert!((rep.slope_dx.unwrap() - 5.0).abs() < 1e-9);
        assert!(rep.slope_dt.is_none());
    }

    #[test]
    fn csv_dump_columns() {
        let dom = unit_interval();
        let sde = SdeSpec::brownian(1, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = sample_bundle(&grid, 1, 1, 3, 0).unwrap();
        let path = simulate_reflected(&dom, &sde, 0.0, &[0.4], &bundle).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,time,x_1,A");
        assert_eq!(lines.len(), 6);
    }
}
