//! Solution fields `u(t, x) = Y_t^{t,x}` on a space-time grid, the transformed field
//! `v = eps(t, x, u)` and the diagnostics tying them to the obstacle problem.
//!
//! Every point of a field reuses the same forward streams (common random numbers), so
//! finite differences of a field see the smooth dependence on `(t, x)` rather than
//! independent Monte Carlo noise at each node.

use std::io::Write;
use std::sync::Arc;

use crate::bdsde::{solve, Scheme, SolverOptions};
use crate::coefficients::CoefficientSet;
use crate::doss::{solve_flow, tensor_points, transform_coefficients, FlowField, XSamples};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::noise::{Channel, Increments, TimeGrid};
use crate::reflected_sde::{loglog_slope, simulate_ensemble, EnsembleSpec, SdeSpec};

/// Everything that defines one reflected BDSDE up to the noise path.
#[derive(Clone)]
pub struct Problem {
    pub domain: Domain,
    pub sde: SdeSpec,
    pub coeffs: CoefficientSet,
    pub grid: TimeGrid,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        let d = self.domain.dim();
        if self.sde.dim() != d || self.coeffs.d != d {
            return Err(Error::Dimension(format!(
                "domain has dimension {d}, dynamics {}, coefficients {}",
                self.sde.dim(),
                self.coeffs.d
            )));
        }
        self.coeffs.constants.validate()
    }

    /// The frozen backward noise path of scenario `b_stream`.
    pub fn backward_path(&self, seed: u64, b_stream: u64) -> Result<Increments> {
        Increments::sample(
            &self.grid,
            self.coeffs.ell(),
            seed,
            Channel::Backward,
            b_stream,
        )
    }
}

/// Time nodes and tensor x-axes of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldLayout {
    pub t_nodes: Vec<usize>,
    pub x_axes: Vec<Vec<f64>>,
}

impl FieldLayout {
    pub fn new(t_nodes: Vec<usize>, x_axes: Vec<Vec<f64>>) -> Result<Self> {
        if t_nodes.is_empty() || !t_nodes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter(
                "field time nodes must be strictly increasing".into(),
            ));
        }
        if x_axes.is_empty()
            || x_axes
                .iter()
                .any(|a| a.is_empty() || !a.windows(2).all(|w| w[0] < w[1]))
        {
            return Err(Error::InvalidParameter(
                "field x axes must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(FieldLayout { t_nodes, x_axes })
    }

    /// `n_t` evenly spread grid nodes ending at `T`, and `n_x` points per axis on `[lo, hi]`.
    pub fn uniform(
        grid: &TimeGrid,
        n_t: usize,
        lo: &[f64],
        hi: &[f64],
        n_x: usize,
    ) -> Result<Self> {
        if n_t < 1 || n_x < 1 || lo.len() != hi.len() {
            return Err(Error::InvalidParameter(
                "field layout needs n_t, n_x >= 1 and matching bounds".into(),
            ));
        }
        let n = grid.n_steps();
        let t_nodes: Vec<usize> = if n_t == 1 {
            vec![n]
        } else {
            let mut v: Vec<usize> = (0..n_t)
                .map(|k| ((k * n) as f64 / (n_t - 1) as f64).round() as usize)
                .collect();
            v.dedup();
            v
        };
        let x_axes = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| {
                if n_x == 1 {
                    vec![0.5 * (a + b)]
                } else {
                    (0..n_x)
                        .map(|k| a + (b - a) * k as f64 / (n_x - 1) as f64)
                        .collect()
                }
            })
            .collect();
        FieldLayout::new(t_nodes, x_axes)
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        tensor_points(&self.x_axes)
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.x_axes.len()];
        for a in (0..self.x_axes.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.x_axes[a + 1].len();
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SolutionField {
    pub grid: TimeGrid,
    pub layout: FieldLayout,
    pub points: Vec<Vec<f64>>,
    /// `u[ti * n_points + xi]`
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub h: Option<Vec<f64>>,
    /// Scheme tolerance of each point's solve (0 on the terminal row).
    pub tolerance: Vec<f64>,
    pub n_paths: usize,
    pub scheme: String,
    pub b_stream: u64,
}

impl SolutionField {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn u_at(&self, ti: usize, xi: usize) -> f64 {
        self.u[ti * self.points.len() + xi]
    }

    pub fn max_tolerance(&self) -> f64 {
        self.tolerance.iter().cloned().fold(0.0, f64::max)
    }

    /// Columns `t, x_1..x_d, u, v, h, u_minus_h` (`h` columns empty without an obstacle).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let xs: String = (1..=self.layout.x_axes.len())
            .map(|k| format!("x_{k},"))
            .collect();
        writeln!(out, "t,{xs}u,v,h,u_minus_h")?;
        let np = self.points.len();
        for (ti, &node) in self.layout.t_nodes.iter().enumerate() {
            for (xi, x) in self.points.iter().enumerate() {
                let k = ti * np + xi;
                let xcols: String = x.iter().map(|v| format!("{v:.17e},")).collect();
                let (h, gap) = match &self.h {
                    Some(h) => (
                        format!("{:.17e}", h[k]),
                        format!("{:.17e}", self.u[k] - h[k]),
                    ),
                    None => (String::new(), String::new()),
                };
                writeln!(
                    out,
                    "{:.17e},{xcols}{:.17e},{:.17e},{h},{gap}",
                    self.grid.time(node),
                    self.u[k],
                    self.v[k]
                )?;
            }
        }
        Ok(())
    }
}

/// Solves from every `(t, x)` of the layout with the backward path of scenario `b_stream`.
/// `v` goes through `flow` when the noise is non-zero.
pub fn build_field(
    problem: &Problem,
    layout: &FieldLayout,
    scheme: Scheme,
    opts: &SolverOptions,
    ens: EnsembleSpec,
    b_stream: u64,
    flow: Option<&FlowField>,
) -> Result<SolutionField> {
    problem.validate()?;
    let d = problem.domain.dim();
    if layout.x_axes.len() != d {
        return Err(Error::Dimension(format!(
            "field has {} axes, domain dimension {d}",
            layout.x_axes.len()
        )));
    }
    let n = problem.grid.n_steps();
    if layout.t_nodes.iter().any(|&i| i > n) {
        return Err(Error::InvalidParameter(format!(
            "field time node beyond the grid's {n} steps"
        )));
    }
    let points = layout.points();
    if let Some(x) = points.iter().find(|x| !problem.domain.in_closure(x)) {
        return Err(Error::StartOutsideDomain {
            psi: problem.domain.psi(x),
        }
        .at(format!("field point x = {x:?}")));
    }
    let noisy = !problem.coeffs.noise.is_zero();
    if noisy && flow.is_none() {
        return Err(Error::InvalidParameter(
            "a flow is needed to transform a field with non-zero noise".into(),
        ));
    }
    let b = problem.backward_path(ens.seed, b_stream)?;
    let np = points.len();
    let mut u = Vec::with_capacity(layout.t_nodes.len() * np);
    let mut tolerance = Vec::with_capacity(u.capacity());
    let mut scheme_label = scheme.label();
    for &node in &layout.t_nodes {
        let t = problem.grid.time(node);
        for x in &points {
            if node == n {
                u.push(problem.coeffs.l(x));
                tolerance.push(0.0);
                continue;
            }
            let ctx = || format!("field point t = {t}, x = {x:?}");
            let paths = simulate_ensemble(
                &problem.domain,
                &problem.sde,
                &problem.grid,
                t,
                x,
                ens,
                &b,
                b_stream,
            )
            .map_err(|e| e.at(ctx()))?;
            let sol = solve(&problem.coeffs, &paths, scheme, opts).map_err(|e| e.at(ctx()))?;
            scheme_label = sol.scheme.label();
            u.push(sol.start_value());
            tolerance.push(sol.tolerance());
        }
    }
    let mut v = u.clone();
    if let (true, Some(flow)) = (noisy, flow) {
        for (ti, &node) in layout.t_nodes.iter().enumerate() {
            let t = problem.grid.time(node);
            for (xi, x) in points.iter().enumerate() {
                let k = ti * np + xi;
                v[k] = flow
                    .inverse(t, x, u[k])
                    .map_err(|e| e.at(format!("inverting the flow at t = {t}, x = {x:?}")))?;
            }
        }
    }
    let h = problem.coeffs.obstacle.as_ref().map(|_| {
        layout
            .t_nodes
            .iter()
            .flat_map(|&node| points.iter().map(move |x| (node, x)))
            .map(|(node, x)| problem.coeffs.h(problem.grid.time(node), x).unwrap())
            .collect()
    });
    Ok(SolutionField {
        grid: problem.grid,
        layout: layout.clone(),
        points,
        u,
        v,
        h,
        tolerance,
        n_paths: ens.n_paths,
        scheme: scheme_label,
        b_stream,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub min_gap: f64,
    pub mean_gap: f64,
    /// Points with `u < h - tolerance`.
    pub violations: usize,
    /// Largest `h - u` over all points (0 if `u >= h` everywhere).
    pub worst_violation: f64,
}

pub fn obstacle_gap_report(field: &SolutionField) -> Result<GapReport> {
    let h = field.h.as_ref().ok_or(Error::MissingObstacle)?;
    let gaps: Vec<f64> = field.u.iter().zip(h).map(|(u, h)| u - h).collect();
    let violations = gaps
        .iter()
        .zip(&field.tolerance)
        .filter(|(g, tol)| **g < -**tol)
        .count();
    Ok(GapReport {
        min_gap: gaps.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
        violations,
        worst_violation: gaps.iter().map(|g| -g).fold(0.0, f64::max),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    Boundary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub kind: NodeKind,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub interior_sup: f64,
    pub interior_rms: f64,
    pub boundary_sup: f64,
    pub boundary_rms: f64,
    pub rows: Vec<ResidualRow>,
}

impl ResidualReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.rows.first().map_or(0, |r| r.x.len());
        let xs: String = (1..=d).map(|k| format!("x_{k},")).collect();
        writeln!(out, "t,{xs}kind,residual")?;
        for r in &self.rows {
            let xcols: String = r.x.iter().map(|v| format!("{v:.17e},")).collect();
            let kind = match r.kind {
                NodeKind::Interior => "interior",
                NodeKind::Boundary => "boundary",
            };
            writeln!(out, "{:.17e},{xcols}{kind},{:.17e}", r.t, r.residual)?;
        }
        Ok(())
    }
}

/// Three-point Lagrange weights for the first and second derivative at `at`.
fn stencil(p: [f64; 3], at: f64) -> ([f64; 3], [f64; 3]) {
    let mut d1 = [0.0; 3];
    let mut d2 = [0.0; 3];
    for j in 0..3 {
        let (a, b) = ((j + 1) % 3, (j + 2) % 3);
        let den = (p[j] - p[a]) * (p[j] - p[b]);
        d1[j] = ((at - p[a]) + (at - p[b])) / den;
        d2[j] = 2.0 / den;
    }
    (d1, d2)
}

/// Three consecutive indices around `i` on an axis of length `len` and the position of `i` in them.
fn window(i: usize, len: usize) -> [usize; 3] {
    if i == 0 {
        [0, 1, 2]
    } else if i + 1 == len {
        [len - 3, len - 2, len - 1]
    } else {
        [i - 1, i, i + 1]
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// Finite-difference residuals of a field with zero noise.
///
/// Interior nodes (every axis index away from the ends, strictly inside the domain, a time
/// node on each side) get `min{u - h, -u_t - L u - f(t, x, u, sigma^T D u)}` with central
/// differences. Nodes on the boundary get `du/dn + phi(t, x, u)` along the inward unit normal,
/// with one-sided second-order differences, at every time node before `T`.
pub fn deterministic_pde_residual(
    field: &SolutionField,
    problem: &Problem,
) -> Result<ResidualReport> {
    if !problem.coeffs.noise.is_zero() {
        return Err(Error::InvalidParameter(
            "the deterministic residual needs g = 0".into(),
        ));
    }
    let layout = &field.layout;
    if layout.t_nodes.len() < 3 || layout.x_axes.iter().any(|a| a.len() < 3) {
        return Err(Error::InvalidParameter(
            "the residual stencil needs at least 3 nodes in time and along every axis".into(),
        ));
    }
    let d = layout.x_axes.len();
    let np = field.points.len();
    let strides = layout.strides();
    let times: Vec<f64> = layout.t_nodes.iter().map(|&i| field.grid.time(i)).collect();
    let index = |xi: usize| -> Vec<usize> {
        (0..d)
            .map(|a| (xi / strides[a]) % layout.x_axes[a].len())
            .collect()
    };
    let at = |ti: usize, idx: &[usize]| -> f64 {
        field.u[ti * np + idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()]
    };

    let mut sigma = vec![0.0; d * d];
    let mut drift = vec![0.0; d];
    let mut rows = Vec::new();
    for (xi, x) in field.points.iter().enumerate() {
        let idx = index(xi);
        let on_boundary = problem.domain.on_boundary(x);
        let interior = !on_boundary
            && idx
                .iter()
                .zip(&layout.x_axes)
                .all(|(&i, a)| i > 0 && i + 1 < a.len());
        if !interior && !on_boundary {
            continue;
        }
        for ti in 0..times.len() {
            let t = times[ti];
            let u = at(ti, &idx);
            // gradient and Hessian in x
            let mut grad = vec![0.0; d];
            let mut hess = vec![0.0; d * d];
            for a in 0..d {
                let w = window(idx[a], layout.x_axes[a].len());
                let p = [
                    layout.x_axes[a][w[0]],
                    layout.x_axes[a][w[1]],
                    layout.x_axes[a][w[2]],
                ];
                let (d1, d2) = stencil(p, layout.x_axes[a][idx[a]]);
                let mut moved = idx.clone();
                for j in 0..3 {
                    moved[a] = w[j];
                    let v = at(ti, &moved);
                    grad[a] += d1[j] * v;
                    hess[a * d + a] += d2[j] * v;
                }
            }
            let residual = if interior {
                if ti == 0 || ti + 1 == times.len() {
                    continue;
                }
                for a in 0..d {
                    for b in a + 1..d {
                        let mut sum = 0.0;
                        for (sa, sb) in [(1isize, 1isize), (1, -1), (-1, 1), (-1, -1)] {
                            let mut m = idx.clone();
                            m[a] = (m[a] as isize + sa) as usize;
                            m[b] = (m[b] as isize + sb) as usize;
                            sum += (sa * sb) as f64 * at(ti, &m);
                        }
                        let ha = layout.x_axes[a][idx[a] + 1] - layout.x_axes[a][idx[a] - 1];
                        let hb = layout.x_axes[b][idx[b] + 1] - layout.x_axes[b][idx[b] - 1];
                        hess[a * d + b] = sum / (ha * hb);
                        hess[b * d + a] = hess[a * d + b];
                    }
                }
                let (d1, _) = stencil([times[ti - 1], times[ti], times[ti + 1]], t);
                let u_t = d1[0] * at(ti - 1, &idx) + d1[1] * u + d1[2] * at(ti + 1, &idx);
                problem.sde.diffusion(x, &mut sigma);
                problem.sde.drift(x, &mut drift);
                let mut lu = 0.0;
                for i in 0..d {
                    lu += drift[i] * grad[i];
                    for j in 0..d {
                        let a: f64 = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
                        lu += 0.5 * a * hess[i * d + j];
                    }
                }
                let z: Vec<f64> = (0..d)
                    .map(|j| (0..d).map(|i| sigma[i * d + j] * grad[i]).sum())
                    .collect();
                let r = -u_t - lu - problem.coeffs.f(t, x, u, &z);
                match problem.coeffs.h(t, x) {
                    Some(h) => (u - h).min(r),
                    None => r,
                }
            } else {
                if ti + 1 == times.len() {
                    continue;
                }
                let n = problem.domain.inward_normal(x)?;
                let dn: f64 = grad.iter().zip(&n).map(|(g, n)| g * n).sum();
                let r = dn + problem.coeffs.phi(t, x, u);
                match problem.coeffs.h(t, x) {
                    Some(h) => (u - h).min(r),
                    None => r,
                }
            };
            rows.push(ResidualRow {
                t,
                x: x.clone(),
                kind: if interior {
                    NodeKind::Interior
                } else {
                    NodeKind::Boundary
                },
                residual: residual.abs(),
            });
        }
    }
    let pick = |k: NodeKind| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.kind == k)
            .map(|r| r.residual)
            .collect()
    };
    let (inner, outer) = (pick(NodeKind::Interior), pick(NodeKind::Boundary));
    Ok(ResidualReport {
        interior_sup: inner.iter().cloned().fold(0.0, f64::max),
        interior_rms: rms(&inner),
        boundary_sup: outer.iter().cloned().fold(0.0, f64::max),
        boundary_rms: rms(&outer),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DossScenario {
    pub b_stream: u64,
    /// `max |eps(t, x, u) - v|` over the layout.
    pub sup_diff: f64,
    /// Largest scheme tolerance of the two fields.
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DossReport {
    pub scenarios: Vec<DossScenario>,
}

impl DossReport {
    pub fn sup_diff(&self) -> f64 {
        self.scenarios
            .iter()
            .map(|s| s.sup_diff)
            .fold(0.0, f64::max)
    }

    /// Whether every scenario stays within `factor` times its scheme tolerance.
    pub fn within(&self, factor: f64) -> bool {
        self.scenarios
            .iter()
            .all(|s| s.sup_diff <= factor * s.tolerance)
    }
}

/// Builds `u` with the backward noise and `v` from the transformed problem without it,
/// then compares `eps(., ., u)` with `v` on the layout, per backward scenario.
#[allow(clippy::too_many_arguments)]
pub fn doss_consistency(
    problem: &Problem,
    layout: &FieldLayout,
    scheme: Scheme,
    opts: &SolverOptions,
    ens: EnsembleSpec,
    b_streams: &[u64],
    flow_x: XSamples,
    y_samples: &[f64],
) -> Result<DossReport> {
    let mut scenarios = Vec::with_capacity(b_streams.len());
    for &s in b_streams {
        let b = problem.backward_path(ens.seed, s)?;
        let flow = Arc::new(solve_flow(
            problem.coeffs.noise.as_ref(),
            &problem.grid,
            &b,
            problem.domain.dim(),
            flow_x.clone(),
            y_samples.to_vec(),
            s,
        )?);
        let direct = build_field(problem, layout, scheme, opts, ens, s, Some(&flow))?;
        let tc = transform_coefficients(&problem.coeffs, flow, &problem.domain, &problem.sde)?;
        let transformed = Problem {
            coeffs: tc.coeffs.clone(),
            ..problem.clone()
        };
        let plain = tc.guarded(build_field(
            &transformed,
            layout,
            scheme,
            opts,
            ens,
            s,
            None,
        ))?;
        let sup_diff = direct
            .v
            .iter()
            .zip(&plain.u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        scenarios.push(DossScenario {
            b_stream: s,
            sup_diff,
            tolerance: direct.max_tolerance().max(plain.max_tolerance()),
        });
    }
    Ok(DossReport { scenarios })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub n_paths: usize,
    pub mean: f64,
    /// Variance of the conditional mean `E[u | B]` across backward scenarios.
    pub across_b_variance: f64,
    /// Monte Carlo variance of `u` for a fixed backward path.
    pub within_b_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub rows: Vec<ProbeRow>,
    /// Log-log slope of the within-B variance against `n_paths` (about -1 for pure MC error).
    pub within_slope: Option<f64>,
}

/// Variance decomposition of `u(t, x)` over `n_b` backward paths, each with `replicas`
/// independent forward ensembles, for every ensemble size in `path_counts`.
#[allow(clippy::too_many_arguments)]
pub fn b_measurability_probe(
    problem: &Problem,
    t_node: usize,
    x: &[f64],
    n_b: usize,
    replicas: usize,
    path_counts: &[usize],
    seed: u64,
    scheme: Scheme,
    opts: &SolverOptions,
) -> Result<ProbeReport> {
    problem.validate()?;
    if n_b < 2 || replicas < 2 {
        return Err(Error::InvalidParameter(
            "the probe needs at least 2 backward scenarios and 2 replicas".into(),
        ));
    }
    if t_node >= problem.grid.n_steps() {
        return Err(Error::InvalidParameter(
            "the probe point must lie before T".into(),
        ));
    }
    let t = problem.grid.time(t_node);
    let mut rows = Vec::with_capacity(path_counts.len());
    for &n_paths in path_counts {
        let mut means = Vec::with_capacity(n_b);
        let mut within = 0.0;
        for s in 0..n_b as u64 {
            let b = problem.backward_path(seed, s)?;
            let mut vals = Vec::with_capacity(replicas);
            for r in 0..replicas {
                let spec = EnsembleSpec {
                    n_paths,
                    seed,
                    first_stream: (r * n_paths) as u64,
                };
                let ens = simulate_ensemble(
                    &problem.domain,
                    &problem.sde,
                    &problem.grid,
                    t,
                    x,
                    spec,
                    &b,
                    s,
                )?;
                vals.push(solve(&problem.coeffs, &ens, scheme, opts)?.start_value());
            }
            let m = vals.iter().sum::<f64>() / replicas as f64;
            within += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (replicas - 1) as f64;
            means.push(m);
        }
        within /= n_b as f64;
        let grand = means.iter().sum::<f64>() / n_b as f64;
        let spread =
            means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (n_b - 1) as f64;
        rows.push(ProbeRow {
            n_paths,
            mean: grand,
            across_b_variance: (spread - within / replicas as f64).max(0.0),
            within_b_variance: within,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.within_b_variance > 0.0)
        .map(|r| (r.n_paths as f64, r.within_b_variance))
        .collect();
    Ok(ProbeReport {
        t,
        x: x.to_vec(),
        within_slope: loglog_slope(&pts),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bdsde::PenaltyMode;
    use crate::coefficients::AffineNoise;

    fn heat_problem(n: usize) -> Problem {
        Problem {
            domain: Domain::interval(-20.0, 20.0).unwrap(),
            sde: SdeSpec::brownian(1, 2f64.sqrt()).unwrap(),
            coeffs: CoefficientSet::zero(1, 1).with_terminal(|x| x[0].cos()),
            grid: TimeGrid::new(0.0, 1.0, n).unwrap(),
        }
    }

    fn ens(n_paths: usize) -> EnsembleSpec {
        EnsembleSpec {
            n_paths,
            seed: 3,
            first_stream: 0,
        }
    }

    #[test]
    fn constant_terminal_gives_constant_field() {
        let mut p = heat_problem(20);
        p.coeffs = CoefficientSet::zero(1, 1).with_terminal(|_| 5.0);
        let layout = FieldLayout::uniform(&p.grid, 3, &[-1.0], &[1.0], 5).unwrap();
        let f = build_field(
            &p,
            &layout,
            Scheme::Generalized,
            &SolverOptions::default(),
            ens(200),
            0,
            None,
        )
        .unwrap();
        assert!(f.u.iter().all(|u| (u - 5.0).abs() < 1e-12));
        let r = deterministic_pde_residual(&f, &p).unwrap();
        assert!(r.interior_sup < 1e-9, "{}", r.interior_sup);
    }

    #[test]
    fn terminal_row_is_exact_and_heat_kernel_matches() {
        let p = heat_problem(50);
        let layout = FieldLayout::uniform(&p.grid, 3, &[-1.0], &[1.0], 5).unwrap();
        let f = build_field(
            &p,
            &layout,
            Scheme::Generalized,
            &SolverOptions::default(),
            ens(20000),
            0,
            None,
        )
        .unwrap();
        let last = layout.t_nodes.len() - 1;
        for (xi, x) in f.points.iter().enumerate() {
            assert_eq!(f.u_at(last, xi), x[0].cos());
            for (ti, &node) in layout.t_nodes.iter().enumerate() {
                let exact = (-(1.0 - p.grid.time(node))).exp() * x[0].cos();
                assert!((f.u_at(ti, xi) - exact).abs() < 2e-2);
            }
        }
    }

    #[test]
    fn direct_field_dominates_obstacle_and_penalized_gap_shrinks() {
        let mut p = heat_problem(40);
        p.coeffs = p.coeffs.with_obstacle(|_, x| 0.9 * x[0].cos() + 0.05);
        let layout = FieldLayout::uniform(&p.grid, 3, &[-0.5], &[0.5], 3).unwrap();
        let opts = SolverOptions::default();
        let direct = build_field(&p, &layout, Scheme::Direct, &opts, ens(2000), 0, None).unwrap();
        let rep = obstacle_gap_report(&direct).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.min_gap >= 0.0);
        let worst = |n: f64| {
            let f = build_field(
                &p,
                &layout,
                Scheme::Penalized {
                    n,
                    mode: PenaltyMode::Implicit,
                },
                &opts,
                ens(2000),
                0,
                None,
            )
            .unwrap();
            obstacle_gap_report(&f).unwrap().worst_violation
        };
        assert!(worst(256.0) < worst(4.0));
    }

    #[test]
    fn far_obstacle_has_no_violations() {
        let mut p = heat_problem(20);
        p.coeffs = p.coeffs.with_obstacle(|_, _| -1e6);
        let layout = FieldLayout::uniform(&p.grid, 2, &[-0.5], &[0.5], 3).unwrap();
        let f = build_field(
            &p,
            &layout,
            Scheme::Direct,
            &SolverOptions::default(),
            ens(500),
            0,
            None,
        )
        .unwrap();
        let rep = obstacle_gap_report(&f).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.min_gap > 1e6 - 2.0);
    }

    #[test]
    fn residual_rejects_coarse_grid_and_noise() {
        let p = heat_problem(20);
        let layout = FieldLayout::uniform(&p.grid, 2, &[-0.5], &[0.5], 3).unwrap();
        let f = build_field(
            &p,
            &layout,
            Scheme::Generalized,
            &SolverOptions::default(),
            ens(100),
            0,
            None,
        )
        .unwrap();
        assert!(deterministic_pde_residual(&f, &p).is_err());
        let mut q = p.clone();
        q.coeffs = q
            .coeffs
            .with_noise(Arc::new(AffineNoise::constant(vec![0.3])));
        assert!(deterministic_pde_residual(&f, &q).is_err());
        assert!(build_field(
            &q,
            &layout,
            Scheme::Generalized,
            &SolverOptions::default(),
            ens(100),
            0,
            None
        )
        .is_err());
    }

    #[test]
    fn field_points_outside_the_domain_are_rejected() {
        let p = heat_problem(10);
        let layout = FieldLayout::uniform(&p.grid, 2, &[-30.0], &[0.0], 3).unwrap();
        let err = build_field(
            &p,
            &layout,
            Scheme::Generalized,
            &SolverOptions::default(),
            ens(10),
            0,
            None,
        )
        .unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn zero_noise_probe_has_no_spread_across_b() {
        let p = heat_problem(10);
        let r = b_measurability_probe(
            &p,
            0,
            &[0.2],
            3,
            2,
            &[200, 400],
            1,
            Scheme::Generalized,
            &SolverOptions::default(),
        )
        .unwrap();
        for row in &r.rows {
            assert_eq!(row.across_b_variance, 0.0);
            assert!(row.within_b_variance > 0.0);
        }
    }
}
